use yono_core::diagnostics::tiny_fixture;
use yono_core::model::{Model, Prefix, Session};
use yono_core::trainer::{example_decoder_scores, forward_example_frozen_targets};

fn probe(name: &str, model: &Model, loss_of: &dyn Fn(&Model) -> f64, grad_dir: &[Vec<f32>], an_base: f64) {
    let eps = 1.25e-4f32;
    let shift = |sign: f32| -> Model {
        let mut m = Model { config: model.config.clone(), params: model.params.clone() };
        for i in 0..m.params.len() {
            let p = m.params.values_mut(i);
            for (x, &dv) in p.iter_mut().zip(&grad_dir[i]) { *x += sign * eps * dv; }
        }
        m
    };
    let (plus, minus) = (shift(1.0), shift(-1.0));
    // analytic with actual deltas
    let an: f64 = grad_dir.iter().enumerate().map(|(i, _)| {
        let (p, mm) = (plus.params.values(i), minus.params.values(i));
        let base = model.params.values(i);
        // grad = an_base direction itself scaled by gnorm... we pass grad as dir*gnorm: easier recompute outside
        let _ = (p, mm, base);
        0.0
    }).sum::<f64>() + an_base; // an supplied by caller from exact dot
    let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * eps as f64);
    println!("{name:<12} fd={fd:<11.5} an={an:<11.5} diff={:+.4} rel={:.2e}", fd - an, (fd - an).abs() / fd.abs().max(an.abs()).max(0.1));
}

fn main() {
    let (model, example) = tiny_fixture(3).unwrap();
    let gamma = 5.0;
    let mut s0 = Session::inference(&model);
    let base = example_decoder_scores(&mut s0, &example, gamma).unwrap();
    drop(s0);

    for comp in ["retrieval", "rerank", "reading", "total", "encoder_probe"] {
        // analytic grads of this component
        let mut sess = Session::new(&model, false, 0);
        let lref = if comp == "encoder_probe" {
            let h = sess.embed(&example.candidates[0].1, Prefix::Passage).unwrap();
            let out = sess.run_encoder_range(&h, 0, 3).unwrap();
            let n: usize = out.mask.len() * 16;
            let w: Vec<f32> = (0..n).map(|i| ((i * 37 % 17) as f32 - 8.0) * 0.08).collect();
            let wc = sess.graph.constant(w, vec![out.mask.len(), 16]);
            let p = sess.graph.mul(out.states, wc).unwrap();
            sess.graph.sum_all(p)
        } else {
            let (l, _) = forward_example_frozen_targets(&mut sess, &example, gamma, &base).unwrap();
            match comp { "retrieval" => l.retrieval, "rerank" => l.rerank, "reading" => l.reading, _ => l.total }
        };
        let grads = sess.graph.backward(lref).unwrap();
        let pg = sess.collect_param_grads(&grads);
        drop(sess);
        let mut dir: Vec<Vec<f32>> = (0..model.params.len())
            .map(|i| pg[i].clone().unwrap_or_else(|| vec![0.0; model.params.values(i).len()])).collect();
        let norm = dir.iter().flat_map(|v| v.iter()).map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt() as f32;
        if norm == 0.0 { continue; }
        dir.iter_mut().for_each(|v| v.iter_mut().for_each(|x| *x /= norm));
        let an: f64 = pg.iter().zip(&dir).map(|(g, d)| match g {
            Some(g) => g.iter().zip(d).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>(),
            None => 0.0,
        }).sum();

        let comp2 = comp.to_string();
        let example2 = &example;
        let base2 = &base;
        let loss_of = move |m: &Model| -> f64 {
            let mut s = Session::inference(m);
            if comp2 == "encoder_probe" {
                let h = s.embed(&example2.candidates[0].1, Prefix::Passage).unwrap();
                let out = s.run_encoder_range(&h, 0, 3).unwrap();
                let n: usize = out.mask.len() * 16;
                let w: Vec<f32> = (0..n).map(|i| ((i * 37 % 17) as f32 - 8.0) * 0.08).collect();
                let wc = s.graph.constant(w, vec![out.mask.len(), 16]);
                let p = s.graph.mul(out.states, wc).unwrap();
                let l = s.graph.sum_all(p);
                s.graph.data(l)[0] as f64
            } else {
                let (l, _) = forward_example_frozen_targets(&mut s, example2, gamma, base2).unwrap();
                let r = match comp2.as_str() { "retrieval" => l.retrieval, "rerank" => l.rerank, "reading" => l.reading, _ => l.total };
                s.graph.data(r)[0] as f64
            }
        };
        probe(comp, &model, &loss_of, &dir, an);
    }
}
