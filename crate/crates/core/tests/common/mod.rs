//! Oracles and check routines shared by the integration tests and the
//! acceptance suite. Every check returns the measured quantity so callers
//! can assert or report it.

#![allow(dead_code)]

use std::rc::Rc;

use fsmol_core::cgib::{self, NoiseStats};
use fsmol_core::context::build_context_graph;
use fsmol_core::cprl::{enumerate_relation_samples, predict_relation, relation_loss, relation_target, RelationLossMode};
use fsmol_core::data::{Dataset, Label, LabelMatrix, MoleculeGraph};
use fsmol_core::episodes::{sample_episode, AuxPolicy, Episode, EpisodeShape};
use fsmol_core::eval::{pr_auc, roc_auc};
use fsmol_core::meta::{bce_sum, inner_adapt, outer_loss, predict_property, GateDraws, PreparedEpisode, TrainConfig};
use fsmol_core::tensor::{ParamView, ParameterSet, Tape, Tensor, Var};
use fsmol_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Entries bounded away from zero, so ReLU and clamp kinks stay out of
/// reach of a finite-difference step.
pub fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(0.1..1.5);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

const FD_STEP: f64 = 1e-6;

/// `||a - b|| / max(||a||, ||b||)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Largest relative error between reverse-mode and central-difference
/// gradients of a scalar function of `inputs`.
pub fn fd_check_inputs(inputs: &[Tensor], f: &dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>) -> f64 {
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let loss = f(&tape, &vars).unwrap();
    let grads = tape.gradients(loss, &vars, false).unwrap();
    let eval = |xs: &[Tensor]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        f(&tape, &vars).unwrap().item()
    };
    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads[i].map_or_else(|| vec![0.0; x.numel()], |g| g.value().data().to_vec());
        let mut numeric = Vec::with_capacity(x.numel());
        for k in 0..x.numel() {
            let mut xs = inputs.to_vec();
            let mut d = x.data().to_vec();
            d[k] += FD_STEP;
            xs[i] = Tensor::new(x.shape().to_vec(), d.clone()).unwrap();
            let up = eval(&xs);
            d[k] -= 2.0 * FD_STEP;
            xs[i] = Tensor::new(x.shape().to_vec(), d).unwrap();
            let down = eval(&xs);
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}

/// Same as [`fd_check_inputs`] over every entry of a parameter set.
pub fn fd_check_params(params: &ParameterSet, f: &dyn for<'t> Fn(&ParamView<'t>) -> Result<Var<'t>>) -> f64 {
    let tape = Tape::new();
    let view = ParamView::leaves(&tape, params);
    let grads = view.gradient_values(f(&view).unwrap()).unwrap();
    let eval = |p: &ParameterSet| -> f64 {
        // leaves, so that inner adaptation inside `f` still sees gradients
        let tape = Tape::new();
        let view = ParamView::leaves(&tape, p);
        f(&view).unwrap().item()
    };
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for (path, value) in params.iter() {
        analytic.extend_from_slice(grads[path].data());
        for k in 0..value.numel() {
            let mut p = params.clone();
            let mut d = value.data().to_vec();
            d[k] += FD_STEP;
            p.set(path, Tensor::new(value.shape().to_vec(), d.clone()).unwrap()).unwrap();
            let up = eval(&p);
            d[k] -= 2.0 * FD_STEP;
            p.set(path, Tensor::new(value.shape().to_vec(), d).unwrap()).unwrap();
            let down = eval(&p);
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
    }
    relative_error(&analytic, &numeric)
}

/// Weighted sum reducing any tensor-valued op to a scalar.
pub fn project<'t>(tape: &'t Tape, y: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let w = random_tensor(&y.shape(), -1.0, 1.0, &mut rng(seed ^ 0xabc));
    y.mul(tape.constant(w)).map(|v| v.sum())
}

/// Worst finite-difference error per op over `instances` random draws.
pub fn op_gradient_errors(instances: u64) -> Vec<(&'static str, f64)> {
    type OpFn = for<'t> fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>;
    let ops: Vec<(&'static str, Vec<Vec<usize>>, OpFn)> = vec![
        ("add", vec![vec![3, 4], vec![1, 4]], |_, v| v[0].add(v[1])),
        ("sub", vec![vec![3, 4], vec![3, 1]], |_, v| v[0].sub(v[1])),
        ("mul", vec![vec![3, 4], vec![3, 4]], |_, v| v[0].mul(v[1])),
        ("div", vec![vec![3, 4], vec![1, 4]], |_, v| v[0].div(v[1])),
        ("neg_scale_shift", vec![vec![2, 5]], |_, v| Ok(v[0].neg().scale(1.7).add_scalar(0.3))),
        ("matmul", vec![vec![3, 4], vec![4, 2]], |_, v| v[0].matmul(v[1])),
        ("transpose", vec![vec![3, 4]], |_, v| v[0].t()),
        ("sigmoid", vec![vec![3, 3]], |_, v| Ok(v[0].sigmoid())),
        ("relu", vec![vec![3, 3]], |_, v| Ok(v[0].relu())),
        ("log", vec![vec![3, 3]], |_, v| v[0].square().add_scalar(0.5).log()),
        ("exp", vec![vec![3, 3]], |_, v| Ok(v[0].exp())),
        ("square", vec![vec![3, 3]], |_, v| Ok(v[0].square())),
        ("sqrt", vec![vec![3, 3]], |_, v| v[0].square().add_scalar(0.2).sqrt()),
        ("clamp", vec![vec![4, 4]], |_, v| Ok(v[0].clamp(-0.8, 0.9))),
        ("sum", vec![vec![3, 4]], |_, v| Ok(v[0].square().sum())),
        ("mean", vec![vec![3, 4]], |_, v| Ok(v[0].square().mean())),
        ("sum_rows", vec![vec![3, 4]], |_, v| v[0].sum_rows()),
        ("mean_rows", vec![vec![3, 4]], |_, v| v[0].mean_rows()),
        ("broadcast_to", vec![vec![1, 4]], |_, v| v[0].broadcast_to(&[3, 4])),
        ("sum_to", vec![vec![3, 4]], |_, v| v[0].sum_to(&[3, 1])),
        ("reshape", vec![vec![3, 4]], |_, v| v[0].reshape(&[2, 6])),
        ("concat0", vec![vec![2, 3], vec![1, 3]], |_, v| Var::concat(&[v[0], v[1]], 0)),
        ("concat1", vec![vec![2, 3], vec![2, 2]], |_, v| Var::concat(&[v[0], v[1]], 1)),
        ("slice", vec![vec![4, 3]], |_, v| v[0].slice(0, 1, 2)),
        ("pad", vec![vec![2, 3]], |_, v| v[0].pad(1, 1, 5)),
        ("gather_rows", vec![vec![4, 3]], |_, v| v[0].gather_rows(Rc::from(vec![2, 0, 2, 3]))),
        ("scatter_add_rows", vec![vec![4, 3]], |_, v| v[0].scatter_add_rows(Rc::from(vec![1, 0, 1, 2]), 3)),
    ];
    let mut out = Vec::new();
    for (name, shapes, op) in ops {
        let mut worst: f64 = 0.0;
        for s in 0..instances {
            let mut r = rng(1000 + s);
            let inputs: Vec<Tensor> = shapes.iter().map(|sh| away_from_zero(sh, &mut r)).collect();
            let err = fd_check_inputs(&inputs, &|tape, v| project(tape, op(tape, v)?, s));
            worst = worst.max(err);
        }
        out.push((name, worst));
    }
    out
}

/// Two-layer head parameters under `prefix` with random weights.
pub fn head_params(prefix: &str, dims: (usize, usize, usize), seed: u64) -> ParameterSet {
    let mut r = rng(seed);
    let mut p = ParameterSet::new();
    p.insert(format!("{prefix}.0.w"), away_from_zero(&[dims.0, dims.1], &mut r)).unwrap();
    p.insert(format!("{prefix}.0.b"), random_tensor(&[1, dims.1], -0.5, 0.5, &mut r)).unwrap();
    p.insert(format!("{prefix}.1.w"), away_from_zero(&[dims.1, dims.2], &mut r)).unwrap();
    p.insert(format!("{prefix}.1.b"), random_tensor(&[1, dims.2], -0.5, 0.5, &mut r)).unwrap();
    p
}

/// Worst finite-difference error per composite loss over `instances` draws.
pub fn loss_gradient_errors(instances: u64) -> Vec<(&'static str, f64)> {
    let d = 3;
    let mut pred: f64 = 0.0;
    let mut rel_mse: f64 = 0.0;
    let mut rel_bce: f64 = 0.0;
    let mut mi: f64 = 0.0;
    let mut cont: f64 = 0.0;
    for s in 0..instances {
        let mut r = rng(7000 + s);
        // prediction loss with respect to head weights and representations
        let mut p = head_params("pred", (2 * d, 4, 1), s);
        p.insert("h", away_from_zero(&[5, d], &mut r)).unwrap();
        p.insert("t", away_from_zero(&[1, d], &mut r)).unwrap();
        let labels: Vec<f64> = (0..5).map(|i| (i % 2) as f64).collect();
        pred = pred.max(fd_check_params(&p, &|v| {
            bce_sum(predict_property(v, v.get("h")?, v.get("t")?)?, &labels)
        }));

        // relation loss, both modes
        let mut p = head_params("rel", (2 * d, 4, 1), s + 1);
        p.insert("h", away_from_zero(&[4, d], &mut r)).unwrap();
        p.insert("a", away_from_zero(&[4, d], &mut r)).unwrap();
        p.insert("b", away_from_zero(&[4, d], &mut r)).unwrap();
        let targets = [0.0, 1.0, 1.0, 0.0];
        for (mode, slot) in [(RelationLossMode::Mse, &mut rel_mse), (RelationLossMode::Bce, &mut rel_bce)] {
            let e = fd_check_params(&p, &|v| {
                relation_loss(predict_relation(v, v.get("h")?, v.get("a")?, v.get("b")?)?, &targets, mode)
            });
            *slot = slot.max(e);
        }

        // bottleneck penalty with respect to gates and auxiliary features
        let n = 3;
        let lambda = random_tensor(&[n, 1], 0.05, 0.95, &mut r);
        let x = random_tensor(&[n, d], -1.0, 1.0, &mut r);
        let stats = NoiseStats {
            mean: (0..d).map(|_| r.gen_range(-0.5..0.5)).collect(),
            var: (0..d).map(|_| r.gen_range(0.2..2.0)).collect(),
        };
        mi = mi.max(fd_check_inputs(&[lambda, x], &|_, v| cgib::mi_penalty(v[0], v[1], &stats)));

        // contrastive alignment over a batch of readouts
        let z_env = away_from_zero(&[4, d], &mut r);
        let z_task = away_from_zero(&[4, d], &mut r);
        let t = r.gen_range(0.3..2.0);
        cont = cont.max(fd_check_inputs(&[z_env, z_task], &|_, v| cgib::contrastive_alignment(v[0], v[1], t)));
    }
    vec![("pred", pred), ("rel_mse", rel_mse), ("rel_bce", rel_bce), ("mi", mi), ("contrastive", cont)]
}

/// Quadratic surrogates `L_in = 1/2 x'Ax - b'x`, `L_out = 1/2 y'Cy - d'y`
/// with `y = x - a grad L_in(x)`: tape outer gradient versus the closed form
/// `(I - aA)' (C y - d)`. Returns the largest absolute deviation.
pub fn quadratic_maml_error(instances: u64) -> f64 {
    let n = 4;
    let mut worst: f64 = 0.0;
    for s in 0..instances {
        let mut r = rng(300 + s);
        let sym = |r: &mut ChaCha8Rng| {
            let m = random_tensor(&[n, n], -1.0, 1.0, r);
            let mut out = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    out[i * n + j] = (0..n).map(|k| m.data()[k * n + i] * m.data()[k * n + j]).sum::<f64>()
                        + if i == j { 0.5 } else { 0.0 };
                }
            }
            Tensor::new(vec![n, n], out).unwrap()
        };
        let (a_m, c_m) = (sym(&mut r), sym(&mut r));
        let b = random_tensor(&[n, 1], -1.0, 1.0, &mut r);
        let d = random_tensor(&[n, 1], -1.0, 1.0, &mut r);
        let x = random_tensor(&[n, 1], -1.0, 1.0, &mut r);
        let lr = r.gen_range(0.01..0.2);

        let mut params = ParameterSet::new();
        params.insert("x", x.clone()).unwrap();
        let tape = Tape::new();
        let view = ParamView::leaves(&tape, &params);
        fn quad<'t>(m: &Tensor, v: &Tensor, y: Var<'t>) -> Result<Var<'t>> {
            let tape = y.tape();
            let half = y.t()?.matmul(tape.constant(m.clone()))?.matmul(y)?.scale(0.5);
            half.sub(tape.constant(v.clone()).t()?.matmul(y)?).map(|l| l.sum())
        }
        let inner = quad(&a_m, &b, view.get("x").unwrap()).unwrap();
        let g = view.grads(inner, true).unwrap();
        let adapted = view.adapted(&g, lr, false).unwrap();
        let outer = quad(&c_m, &d, adapted.get("x").unwrap()).unwrap();
        let got = view.gradient_values(outer).unwrap()["x"].clone();

        let mv = |m: &Tensor, v: &[f64]| -> Vec<f64> {
            (0..n).map(|i| (0..n).map(|j| m.data()[i * n + j] * v[j]).sum()).collect()
        };
        let ax = mv(&a_m, x.data());
        let y: Vec<f64> = (0..n).map(|i| x.data()[i] - lr * (ax[i] - b.data()[i])).collect();
        let cy = mv(&c_m, &y);
        let resid: Vec<f64> = (0..n).map(|i| cy[i] - d.data()[i]).collect();
        let a_r = mv(&a_m, &resid);
        for i in 0..n {
            let expect = resid[i] - lr * a_r[i];
            worst = worst.max((got.data()[i] - expect).abs());
        }
    }
    worst
}

/// A handful of small molecules over `atom_types` atom types.
pub fn tiny_molecules(n: usize, atom_types: usize, seed: u64) -> Vec<MoleculeGraph> {
    let mut r = rng(seed);
    (0..n)
        .map(|i| {
            let size = r.gen_range(2..5);
            let atoms: Vec<usize> = (0..size).map(|_| r.gen_range(0..atom_types)).collect();
            let bonds = (1..size).map(|v| (r.gen_range(0..v), v, r.gen_range(0..2))).collect();
            MoleculeGraph { id: format!("m{i}"), atoms, bonds }
        })
        .collect()
}

/// Labels with balanced columns: molecule `i` is active on property `p`
/// when `(i + p * shift) % 2 == 0`.
pub fn alternating_labels(n_mol: usize, n_prop: usize, shift: usize) -> LabelMatrix {
    let mut entries = Vec::with_capacity(n_mol * n_prop);
    for i in 0..n_mol {
        for p in 0..n_prop {
            entries.push(Label::from_bool((i + p * shift + i / 2 * p) % 2 == 0));
        }
    }
    LabelMatrix::new(
        (0..n_mol).map(|i| format!("m{i}")).collect(),
        (0..n_prop).map(|p| format!("p{p}")).collect(),
        entries,
    )
    .unwrap()
}

/// Tiny full model: 4 molecules, 2 properties, widths 4.
pub fn tiny_setup(second_property_aux: bool) -> (Dataset, TrainConfig, Episode) {
    let mols = tiny_molecules(4, 3, 11);
    let labels = alternating_labels(4, 2, 1);
    let ds = Dataset::new(mols, labels).unwrap();
    let mut cfg = TrainConfig::default();
    for (k, v) in [("d1", "4"), ("d2", "4"), ("head_hidden", "4"), ("enc_layers", "1"), ("ctx_layers", "1")] {
        cfg.set(k, v).unwrap();
    }
    cfg.model.fit_to(&ds);
    cfg.inner_lr = 0.1;
    let actives = ds.labels.molecules_with(0, Label::Active);
    let inactives = ds.labels.molecules_with(0, Label::Inactive);
    let ep = Episode {
        target: 0,
        support: vec![(actives[0], true), (inactives[0], false)],
        query: vec![actives[1], inactives[1]],
        auxiliaries: if second_property_aux { vec![1] } else { vec![] },
    };
    (ds, cfg, ep)
}

/// Outer gradient through one second-order inner step on the tiny model,
/// against central differences of the composed objective.
pub fn tiny_maml_error(seed: u64) -> f64 {
    let (ds, cfg, ep) = tiny_setup(true);
    let params = cfg.model.init(&mut rng(seed)).unwrap();
    let prep = PreparedEpisode::new(&ds, ep, &cfg.model, true).unwrap();
    let stats = NoiseStats { mean: vec![0.1; 4], var: vec![0.5; 4] };
    let draws = GateDraws::sample(1, &stats, &mut rng(seed + 1));
    fd_check_params(&params, &|view| {
        let (adapted, frozen) = inner_adapt(view, &cfg, &prep, true, None)?;
        Ok(outer_loss(&adapted, &cfg, &prep, frozen, &draws, &stats)?.total)
    })
}

/// Closed-form penalty minus the numerically integrated KL divergence of
/// the perturbed Gaussian from the noise Gaussian, for one dimension and
/// one auxiliary. The closed form drops the constant 1/2, which is added
/// back before comparing. Returns the largest deviation over `draws`.
pub fn mi_kl_error(draws: u64) -> f64 {
    let mut r = rng(99);
    let mut worst: f64 = 0.0;
    for _ in 0..draws {
        let lambda: f64 = r.gen_range(0.02..0.98);
        let x: f64 = r.gen_range(-3.0..3.0);
        let mu: f64 = r.gen_range(-1.0..1.0);
        let var: f64 = r.gen_range(0.1..4.0);
        let stats = NoiseStats { mean: vec![mu], var: vec![var] };
        let closed = cgib::mi_penalty_value(&[lambda], &[vec![x]], &stats);

        let tape = Tape::new();
        let on_tape = cgib::mi_penalty(
            tape.constant(Tensor::new(vec![1, 1], vec![lambda]).unwrap()),
            tape.constant(Tensor::new(vec![1, 1], vec![x]).unwrap()),
            &stats,
        )
        .unwrap()
        .item();

        let sigma = var.sqrt();
        let (qm, qs) = (lambda * x + (1.0 - lambda) * mu, (1.0 - lambda) * sigma);
        let kl = integrate_kl(qm, qs, mu, sigma);
        worst = worst.max((closed - 0.5 - kl).abs()).max((on_tape - closed).abs());
    }
    worst
}

fn log_normal_pdf(z: f64, m: f64, s: f64) -> f64 {
    -0.5 * ((z - m) / s).powi(2) - s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

/// `KL(N(qm, qs^2) || N(pm, ps^2))` by composite Simpson integration over
/// twelve standard deviations of `q`.
pub fn integrate_kl(qm: f64, qs: f64, pm: f64, ps: f64) -> f64 {
    let n = 20_000;
    let (lo, hi) = (qm - 12.0 * qs, qm + 12.0 * qs);
    let h = (hi - lo) / n as f64;
    let f = |z: f64| {
        let lq = log_normal_pdf(z, qm, qs);
        lq.exp() * (lq - log_normal_pdf(z, pm, ps))
    };
    let mut s = f(lo) + f(hi);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(lo + i as f64 * h);
    }
    s * h / 3.0
}

/// `(p, fraction of draws with lambda > 1/2, 3-sigma binomial band)`.
pub fn gumbel_law(p: f64, draws: usize, seed: u64) -> (f64, f64, f64) {
    let mut r = rng(seed);
    let u = cgib::uniform_open(draws, &mut r);
    let hits = u
        .iter()
        .filter(|&&u| cgib::gumbel_sigmoid_value(p, 1.0, u).unwrap() > 0.5)
        .count();
    let frac = hits as f64 / draws as f64;
    (p, frac, 3.0 * (p * (1.0 - p) / draws as f64).sqrt())
}

/// Pairwise ROC-AUC: wins plus half ties over positive-negative pairs.
pub fn brute_roc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            den += 1.0;
            if scores[i] > scores[j] {
                num += 1.0;
            } else if scores[i] == scores[j] {
                num += 0.5;
            }
        }
    }
    num / den
}

/// Average precision by sweeping every distinct score as a threshold and
/// recounting from scratch: `sum (R_k - R_{k-1}) P_k`.
pub fn brute_ap(scores: &[f64], labels: &[bool]) -> f64 {
    let total_pos = labels.iter().filter(|&&l| l).count() as f64;
    let mut thresholds = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let (mut ap, mut prev_recall) = (0.0, 0.0);
    for &t in &thresholds {
        let (mut tp, mut pp) = (0.0, 0.0);
        for (s, &l) in scores.iter().zip(labels) {
            if *s >= t {
                pp += 1.0;
                if l {
                    tp += 1.0;
                }
            }
        }
        let recall = tp / total_pos;
        ap += (recall - prev_recall) * tp / pp;
        prev_recall = recall;
    }
    ap
}

/// Largest deviation of the rank-based metrics from the brute-force
/// oracles over `instances` random cases of size at most 300, half of
/// them with heavy ties.
pub fn metric_oracle_error(instances: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for s in 0..instances {
        let mut r = rng(500 + s);
        let n = r.gen_range(2..=300);
        let mut labels: Vec<bool> = (0..n).map(|_| r.gen_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                let v: f64 = r.gen();
                if s % 2 == 0 {
                    (v * 10.0).floor() / 10.0
                } else {
                    v
                }
            })
            .collect();
        worst = worst
            .max((roc_auc(&scores, &labels).unwrap() - brute_roc(&scores, &labels)).abs())
            .max((pr_auc(&scores, &labels).unwrap() - brute_ap(&scores, &labels)).abs());
    }
    worst
}

/// Random label matrix with unknown entries; every column keeps at least
/// `k` actives and `k` inactives.
pub fn fuzz_labels(r: &mut ChaCha8Rng, k: usize) -> LabelMatrix {
    let n_mol = r.gen_range(4 * k..40);
    let n_prop = r.gen_range(2..7);
    let unknown = r.gen_range(0.0..0.4);
    let mut entries = vec![Label::Unknown; n_mol * n_prop];
    for p in 0..n_prop {
        for i in 0..n_mol {
            entries[i * n_prop + p] = if i < k {
                Label::Active
            } else if i < 2 * k {
                Label::Inactive
            } else if r.gen_bool(unknown) {
                Label::Unknown
            } else {
                Label::from_bool(r.gen_bool(0.5))
            };
        }
    }
    LabelMatrix::new(
        (0..n_mol).map(|i| format!("m{i}")).collect(),
        (0..n_prop).map(|p| format!("p{p}")).collect(),
        entries,
    )
    .unwrap()
}

pub fn fuzz_episode(r: &mut ChaCha8Rng) -> (LabelMatrix, Episode) {
    let k = r.gen_range(1..4);
    let labels = fuzz_labels(r, k);
    let target = r.gen_range(0..labels.num_properties());
    let n_auxi = r.gen_range(0..labels.num_properties());
    let shape = EpisodeShape { k, m: r.gen_range(0..12), n_auxi };
    let pool: Vec<usize> = (0..labels.num_properties()).collect();
    let ep = sample_episode(&labels, target, shape, &AuxPolicy::Random(pool), r).unwrap();
    (labels, ep)
}

/// Violations of the relation-signal contract over `episodes` fuzzed
/// episodes: targets must be symmetric squared differences in {0, 1},
/// query molecules must never pair with the target, and exactly the pairs
/// with two known labels must be present.
pub fn relation_violations(episodes: u64) -> usize {
    let mut bad = 0;
    for s in 0..episodes {
        let mut r = rng(20_000 + s);
        let (labels, ep) = fuzz_episode(&mut r);
        let samples = enumerate_relation_samples(&ep, &labels);
        let props = ep.properties();
        let mols = ep.molecules();
        let n_sup = ep.support.len();
        let label_of = |i: usize, j: usize| -> Option<f64> {
            if j == 0 {
                if i < n_sup {
                    Some(if ep.support[i].1 { 1.0 } else { 0.0 })
                } else {
                    None
                }
            } else {
                labels.get(mols[i], props[j]).value()
            }
        };
        let mut expected = 0;
        for i in 0..mols.len() {
            for a in 0..props.len() {
                for b in a + 1..props.len() {
                    if label_of(i, a).is_some() && label_of(i, b).is_some() {
                        expected += 1;
                    }
                }
            }
        }
        if expected != samples.len() {
            bad += 1;
        }
        for smp in &samples {
            let (ya, yb) = (label_of(smp.molecule, smp.prop_a), label_of(smp.molecule, smp.prop_b));
            let ok = match (ya, yb) {
                (Some(ya), Some(yb)) => {
                    smp.target == relation_target(ya, yb)
                        && relation_target(ya, yb) == relation_target(yb, ya)
                        && (smp.target == 0.0 || smp.target == 1.0)
                }
                _ => false,
            };
            let query_ok = !(smp.from_query && (smp.prop_a == 0 || smp.prop_b == 0));
            let flag_ok = smp.from_query == (smp.molecule >= n_sup);
            if !(ok && query_ok && flag_ok && smp.prop_a < smp.prop_b) {
                bad += 1;
            }
        }
    }
    bad
}

/// Query-target edges carrying a labeled relation over `episodes` fuzzed
/// episodes, counted both in the edge list and in the message topology.
pub fn leakage_violations(episodes: u64) -> usize {
    use fsmol_core::context::Relation;
    let mut bad = 0;
    for s in 0..episodes {
        let mut r = rng(40_000 + s);
        let (labels, ep) = fuzz_episode(&mut r);
        let g = build_context_graph(&ep, &labels).unwrap();
        let n_mol = g.num_molecules();
        for q in g.num_support()..n_mol {
            if g.relation(q, 0) != Relation::Unknown {
                bad += 1;
            }
        }
        for (i, j, rel) in g.edges() {
            if i >= g.num_support() && j == 0 && rel != Relation::Unknown {
                bad += 1;
            }
        }
        let topo = g.topology(true);
        let target_node = n_mol;
        for rel in [Relation::Active, Relation::Inactive] {
            let (src, dst) = topo.edges(rel);
            for (&a, &b) in src.iter().zip(dst) {
                let (mol, prop) = if a < n_mol { (a, b) } else { (b, a) };
                if prop == target_node && mol >= g.num_support() {
                    bad += 1;
                }
            }
        }
    }
    bad
}
