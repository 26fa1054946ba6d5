use super::train::{dynamic_samples, fit_spec, mean_loss, static_samples, HeadKind, TrialData};
use super::*;
use crate::baseline::BaselineConfig;
use crate::dataset::{label_corpus, IncidentRecord};
use crate::datagen::{generate_corpus, SyntheticConfig};
use crate::dist::ParametricDist;
use crate::features::Schema;

fn grid(res: f64, t_max: f64) -> TimeGrid {
    TimeGrid::new(0.0, res, t_max).unwrap()
}

fn random_input(net: &HitNet, rng: &mut Rng) -> NetInput {
    let statics = (0..net.static_width).map(|_| rng.random_range(-1.0..1.0)).collect();
    match net.spec.mode {
        Mode::Static => NetInput::fixed(statics),
        Mode::Sliding => {
            let width = net.spec.window + 1;
            let data = (0..3 * width).map(|_| rng.random_range(-2.0..2.0)).collect();
            NetInput { statics, window: Some(ResidualWindow { width, data }), snapshot: None }
        }
        Mode::RawDynamic => NetInput {
            statics,
            window: None,
            snapshot: Some(DynamicSnapshot {
                at: 10,
                levels: [rng.random(), rng.random(), rng.random()],
                gradients: [rng.random(), rng.random(), rng.random()],
            }),
        },
    }
}

fn small_spec(mode: Mode, head: Head) -> NetSpec {
    NetSpec {
        mode,
        conv_layers: 2,
        filters: 3,
        kernel_size: 5,
        dense_layers: 2,
        neurons: 6,
        window: 12,
        head,
        batch: 8,
        ..Default::default()
    }
}

const HEADS: [Head; 3] = [Head::Nonparametric, Head::Mixture { components: 2 }, Head::Kernel { bandwidth: 3.0 }];

#[test]
fn zero_logits_give_uniform_pmf() {
    let mut net = HitNet::new(small_spec(Mode::Static, Head::Nonparametric), 4, grid(1.0, 9.0), 1).unwrap();
    let k = net.params.len();
    net.params[k - 2].iter_mut().for_each(|w| *w = 0.0);
    net.params[k - 1].iter_mut().for_each(|w| *w = 0.0);
    let c = net.forward(&NetInput::fixed(vec![0.3, -1.0, 2.0, 0.0])).unwrap();
    assert!(c.pmf().iter().all(|p| (p - 0.1).abs() < 1e-15));
}

#[test]
fn single_kernel_is_centred_bump() {
    let g = grid(1.0, 60.0);
    let s = tape::Smoother::gaussian(&g.times(), 3.0);
    let (lo, w) = s.spread(30);
    let total: f64 = w.iter().sum();
    assert!((total - 1.0).abs() < 1e-14);
    let peak = lo + w.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
    assert_eq!(peak, 30);
    for d in 1..10 {
        assert!((w[30 - lo - d] - w[30 - lo + d]).abs() < 1e-15);
    }
}

#[test]
fn one_component_mixture_is_discretized_lognormal() {
    let g = grid(1.0, 400.0);
    let mut net = HitNet::new(small_spec(Mode::Static, Head::Mixture { components: 1 }), 2, g.clone(), 3).unwrap();
    let k = net.params.len();
    net.params[k - 2].iter_mut().for_each(|w| *w = 0.0);
    let (mu, sigma) = (3.4, 0.6);
    net.params[k - 1] = vec![0.0, mu, f64::ln(sigma)];
    let c = net.forward(&NetInput::fixed(vec![1.0, 2.0])).unwrap();
    let d = ParametricDist::LogNormal { mu, sigma };
    for t in [5.0, 20.0, 30.0, 80.0, 200.0] {
        assert!((c.cdf(t) - d.cdf(t).unwrap()).abs() < 1e-12, "{t}");
    }
}

#[test]
fn every_head_emits_valid_curves() {
    let mut rng = keyed(17, 0, 0);
    for mode in [Mode::Static, Mode::Sliding, Mode::RawDynamic] {
        for head in HEADS {
            for draw in 0..40u64 {
                let mut net = HitNet::new(small_spec(mode, head), 3, grid(5.0, 100.0), draw).unwrap();
                let scale = rng.random_range(0.1..20.0);
                for p in net.params.iter_mut().flatten() {
                    *p = rng.random_range(-scale..scale);
                }
                let x = random_input(&net, &mut rng);
                let c = net.forward(&x).unwrap();
                let sum: f64 = c.pmf().iter().sum();
                assert!((sum - 1.0).abs() < 1e-6 && c.pmf().iter().all(|p| *p >= 0.0));
            }
        }
    }
}

fn check_gradient(net: &HitNet, inputs: &[NetInput], targets: &[Target], seed: u64) {
    let refs: Vec<&NetInput> = inputs.iter().collect();
    let mask = keyed(seed, 1, 1);
    let (_, grads) = net.loss_and_grad(&refs, targets, Some(&mut mask.clone())).unwrap();
    let mut rng = keyed(seed, 2, 2);
    let mut worst: f64 = 0.0;
    for (k, g) in grads.iter().enumerate() {
        for _ in 0..6 {
            let i = rng.random_range(0..g.len());
            let h = 1e-6 * net.params[k][i].abs().max(1.0);
            let mut p = net.clone();
            p.params[k][i] += h;
            let up = p.loss_and_grad(&refs, targets, Some(&mut mask.clone())).unwrap().0;
            p.params[k][i] -= 2.0 * h;
            let dn = p.loss_and_grad(&refs, targets, Some(&mut mask.clone())).unwrap().0;
            let fd = (up - dn) / (2.0 * h);
            let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-3);
            worst = worst.max(rel);
        }
    }
    assert!(worst < 1e-4, "{:?} {:?}: {worst}", net.spec.mode, net.spec.head);
}

#[test]
fn gradients_match_finite_differences() {
    for mode in [Mode::Static, Mode::Sliding, Mode::RawDynamic] {
        for (h, head) in HEADS.iter().enumerate() {
            let g = grid(5.0, 60.0);
            let mut net = HitNet::new(small_spec(mode, *head), 3, g, 5 + h as u64).unwrap();
            let mut rng = keyed(21, h as u64, 0);
            // Zero biases put ReLU inputs exactly on the kink for dropped rows.
            for k in (1..net.params.len()).step_by(2) {
                net.params[k].iter_mut().for_each(|b| *b = rng.random_range(-0.3..0.3));
            }
            net.init_mixture_bias(3.0, 0.7);
            let inputs: Vec<NetInput> = (0..8).map(|_| random_input(&net, &mut rng)).collect();
            let targets: Vec<Target> = (0..8)
                .map(|_| Target { time: rng.random_range(1.0..55.0), event: rng.random::<f64>() < 0.7 })
                .collect();
            check_gradient(&net, &inputs, &targets, 40 + h as u64);
        }
    }
}

#[test]
fn inference_is_deterministic() {
    let net = HitNet::new(small_spec(Mode::Sliding, Head::Kernel { bandwidth: 3.0 }), 3, grid(5.0, 60.0), 2).unwrap();
    let x = random_input(&net, &mut keyed(1, 1, 1));
    assert_eq!(net.forward(&x).unwrap(), net.forward(&x).unwrap());
}

#[test]
fn narrow_kernel_matches_softmax_head() {
    let g = grid(1.0, 80.0);
    let np = HitNet::new(small_spec(Mode::Static, Head::Nonparametric), 3, g.clone(), 9).unwrap();
    let mut kn = np.clone();
    kn.spec.head = Head::Kernel { bandwidth: 1e-3 };
    let x = random_input(&np, &mut keyed(2, 2, 2));
    let a = np.forward(&x).unwrap();
    let b = kn.forward(&x).unwrap();
    let tv: f64 = a.pmf().iter().zip(b.pmf()).map(|(p, q)| (p - q).abs()).sum::<f64>() / 2.0;
    assert!(tv < 1e-3, "{tv}");
}

#[test]
fn wrong_input_shape_is_rejected() {
    let net = HitNet::new(small_spec(Mode::Sliding, Head::Nonparametric), 3, grid(5.0, 60.0), 2).unwrap();
    assert!(matches!(net.forward(&NetInput::fixed(vec![0.0; 3])), Err(Error::Shape(_))));
    let mut x = random_input(&net, &mut keyed(1, 1, 1));
    x.statics.push(1.0);
    assert!(matches!(net.forward(&x), Err(Error::Shape(_))));
}

#[test]
fn save_and_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut net = HitNet::new(small_spec(Mode::Sliding, Head::Mixture { components: 3 }), 3, grid(5.0, 60.0), 4).unwrap();
    net.schema_digest = "abc".into();
    let path = dir.path().join("net");
    net.save(&path).unwrap();
    assert_eq!(HitNet::load(&path).unwrap(), net);
}

fn smoke_records() -> (Vec<IncidentRecord>, Schema) {
    let cfg = SyntheticConfig { n_links: 8, weeks: 5, incident_rate: 3.0, seed: 5, ..Default::default() };
    let corpus = generate_corpus(&cfg).unwrap();
    let lc = label_corpus(&corpus, &BaselineConfig::default()).unwrap();
    let covs: Vec<_> = lc.records.iter().map(|r| &r.covariates).collect();
    let schema = Schema::incident_covariates(&covs).unwrap();
    (lc.records, schema)
}

fn static_data(records: &[IncidentRecord], schema: &Schema) -> TrialData {
    let refs: Vec<&IncidentRecord> = records.iter().collect();
    let (tr, ho) = refs.split_at(refs.len() * 3 / 4);
    let max = records.iter().map(|r| r.duration).fold(0.0, f64::max);
    TrialData {
        static_width: schema.width(),
        grid: TimeGrid::for_max_duration(max, 1.0).unwrap(),
        channel_stats: ChannelStats::default(),
        schema_digest: schema.digest(),
        train: static_samples(tr, schema).unwrap(),
        holdout: static_samples(ho, schema).unwrap(),
    }
}

#[test]
fn training_reduces_holdout_loss_and_is_reproducible() {
    let (records, schema) = smoke_records();
    let data = static_data(&records, &schema);
    let spec = NetSpec { neurons: 32, learning_rate: 1e-2, batch: 32, ..Default::default() };
    let cfg = TrainConfig { max_epochs: 12, ..Default::default() };
    let (net, hist) = fit_spec(&spec, &data, &cfg, 3).unwrap();
    let init = hist.epochs[0].holdout_loss;
    assert!(hist.best_holdout() < init);
    assert!(hist.epochs[1].train_loss < hist.epochs[0].train_loss);
    assert!((mean_loss(&net, &data.holdout).unwrap() - hist.best_holdout()).abs() < 1e-9);
    let (net2, hist2) = fit_spec(&spec, &data, &cfg, 3).unwrap();
    assert_eq!(hist, hist2);
    assert_eq!(net.params, net2.params);
}

#[test]
fn sliding_samples_follow_active_minutes() {
    let (records, schema) = smoke_records();
    let refs: Vec<&IncidentRecord> = records.iter().take(20).collect();
    let s = dynamic_samples(&refs, &schema, Mode::Sliding, 30, 5, &ChannelStats::default()).unwrap();
    let expected: usize = refs
        .iter()
        .map(|r| (0..).step_by(5).take_while(|&t| r.active_at(t as f64) && t < r.trace.span()).count())
        .sum();
    assert_eq!(s.len(), expected);
    assert!(s.iter().all(|x| x.target.time > 0.0 && x.input.window.as_ref().unwrap().width == 31));
}

#[test]
fn search_ranks_and_dedups() {
    let (records, schema) = smoke_records();
    let data = |_: &NetSpec| Ok(static_data(&records, &schema));
    let cfg = TrainConfig { max_epochs: 3, ..Default::default() };
    let mut point = SearchSpace::table(Mode::Static).with_head(HeadKind::Nonparametric);
    point.dense_layers = vec![1];
    point.neurons = vec![32];
    point.learning_rates = vec![1e-2];
    point.eta_sigmas = vec![1.0];
    let out = random_search(&point, 4, &cfg, data).unwrap();
    assert_eq!(out.leaderboard.len(), 1);

    let one = random_search(&SearchSpace::table(Mode::Static), 1, &cfg, data).unwrap();
    assert_eq!(one.leaderboard.len(), 1);
    assert_eq!(one.best.spec, one.leaderboard[0].spec);

    let mut small = SearchSpace::table(Mode::Static);
    small.neurons = vec![32, 64];
    small.dense_layers = vec![1];
    let many = random_search(&small, 5, &cfg, data).unwrap();
    assert!(many.leaderboard.windows(2).all(|w| w[0].holdout_loss <= w[1].holdout_loss));
    assert_eq!(many.best.spec, many.leaderboard[0].spec);
}

