// Probe: identify which parameter/coordinate produces the large FD error at seed 0.
use fum_core::config::{Ablation, TrainConfig};
use fum_core::data::{GenreText, NewsRecord};
use fum_core::model::FumModel;
use fum_core::store::{backward_pass, forward_value};
use fum_core::Real;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_news(id: &str, cfg: &TrainConfig, vocab: usize, rng: &mut ChaCha8Rng) -> NewsRecord {
    let genres = (0..cfg.k).map(|_| {
        let real = rng.gen_range(1..=cfg.l);
        let mut ids = vec![0u32; cfg.l];
        let mut mask = vec![false; cfg.l];
        for i in 0..real { ids[i] = rng.gen_range(2..vocab as u32); mask[i] = true; }
        GenreText { ids, mask }
    }).collect();
    NewsRecord { news_id: id.into(), genres }
}

fn main() {
    let seed = 0u64;
    let cfg = TrainConfig { m: 3, k: 2, l: 4, d: 8, d_genre: 4, d_pos: 4, heads: 2, head_dim: 4,
        fastformer_layers: 1, d_att: 8, seed, ..TrainConfig::default() };
    let vocab = 16usize;
    let model = FumModel::new(&cfg, vocab).unwrap();
    let mut store = model.init_params(None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(97).wrapping_add(11));
    let history_len = rng.gen_range(1..=cfg.m);
    let history: Vec<NewsRecord> = (0..history_len).map(|i| random_news(&format!("H{i}"), &cfg, vocab, &mut rng)).collect();
    let positive = random_news("P", &cfg, vocab, &mut rng);
    let negative = random_news("N", &cfg, vocab, &mut rng);
    let refs: Vec<&NewsRecord> = history.iter().collect();

    let build = |g: &mut fum_core::store::Graph| {
        let (u, _, _) = model.user_graph(g, &refs, Ablation::Full)?;
        let n_pos = model.news_graph(g, &positive)?;
        let n_neg = model.news_graph(g, &negative)?;
        let r_pos = g.dot(u, n_pos)?;
        let r_neg = g.dot(u, n_neg)?;
        let delta = g.sub(r_pos, r_neg)?;
        let nd = g.neg(delta);
        Ok(g.softplus(nd))
    };

    store.zero_grads();
    let f0 = backward_pass(&mut store, build).unwrap();
    println!("loss = {f0}");
    let analytic: Vec<(String, Vec<Real>)> = store.iter().map(|(n, t)| (n.to_string(), t.grad().unwrap().to_vec())).collect();

    // Full FD sweep over every coordinate at several eps values.
    for eps in [1e-3, 1e-4, 1e-5] {
        let mut worst = (0.0f64, String::new(), 0usize, 0.0f64, 0.0f64);
        for (name, grads) in &analytic {
            let n = store.get(name).unwrap().numel();
            for coord in 0..n {
                let orig = store.get(name).unwrap().values()[coord];
                store.get_mut(name).unwrap().values_mut()[coord] = orig + eps;
                let fp = forward_value(&store, build).unwrap();
                store.get_mut(name).unwrap().values_mut()[coord] = orig - eps;
                let fm = forward_value(&store, build).unwrap();
                store.get_mut(name).unwrap().values_mut()[coord] = orig;
                let central = (fp - fm) / (2.0 * eps);
                let a = grads[coord];
                let rel = (a - central).abs() / (a.abs() + central.abs() + 1e-12);
                if rel > worst.0 { worst = (rel, name.clone(), coord, a, central); }
            }
        }
        println!("eps={eps:.0e}: worst rel {:.3e} at {}[{}]: analytic={:.6e} central={:.6e}", worst.0, worst.1, worst.2, worst.3, worst.4);
    }
}
