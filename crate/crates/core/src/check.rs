//! Self-checks against independent reference computations.
//!
//! Every check draws its inputs from a seeded generator and compares the
//! library against a brute-force or finite-difference reference.

use std::collections::BTreeSet;
use std::time::Instant;

use crate::clip::{ClipTensor, Frames};
use crate::encoder::{Encoder, ModelConfig};
use crate::error::Result;
use crate::params::{decode_checkpoint, encode_checkpoint, ParamStore};
use crate::retrieval::{average_precision, CorpusIndex};
use crate::rng::SeedRng;
use crate::similarity::{chamfer, topk_cs, ClipMatrix};
use crate::simlearn::{fcs_loss, mine_pairs, ms_loss, LossConfig};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Step for central differences.
pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        Self { name, passed, detail }
    }
}

impl std::fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn random_tensor(rng: &mut SeedRng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| lo + (hi - lo) * rng.uniform()).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Random unit rows, as a clip-embedding matrix.
pub fn random_unit_matrix(rng: &mut SeedRng, rows: usize, dim: usize) -> ClipMatrix {
    loop {
        let data: Vec<f32> = (0..rows * dim).map(|_| rng.normal() as f32).collect();
        if let Ok(m) = ClipMatrix::normalized(rows, dim, data) {
            return m;
        }
    }
}

type OpFn = fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

/// Builds `sum(op(inputs) ⊙ w)` for a fixed random `w` and returns the value
/// and the gradient for every input.
fn probe(op: OpFn, inputs: &[Tensor<f64>], weight: &mut Option<Tensor<f64>>, rng: &mut SeedRng) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = op(&mut tape, &vars)?;
    let shape = tape.shape(out).to_vec();
    let w = weight.get_or_insert_with(|| random_tensor(rng, &shape, -1.0, 1.0)).clone();
    let w = tape.constant(w);
    let prod = tape.mul(out, w)?;
    let loss = tape.sum(prod)?;
    let grads = tape.backward(loss)?;
    let value = tape.value(loss).item();
    let g = vars
        .iter()
        .map(|&v| grads.get(v).map(|t| t.data().to_vec()).unwrap_or_default())
        .collect();
    Ok((value, g))
}

fn op_cases() -> Vec<(&'static str, Vec<Vec<usize>>, OpFn)> {
    vec![
        ("add", vec![vec![3, 4], vec![3, 4]], |t, v| t.add(v[0], v[1])),
        ("sub", vec![vec![3, 4], vec![3, 4]], |t, v| t.sub(v[0], v[1])),
        ("mul", vec![vec![3, 4], vec![3, 4]], |t, v| t.mul(v[0], v[1])),
        ("scale", vec![vec![5]], |t, v| t.scale(v[0], -1.7)),
        ("add_row", vec![vec![3, 4], vec![4]], |t, v| t.add_row(v[0], v[1])),
        ("matmul", vec![vec![3, 5], vec![5, 2]], |t, v| t.matmul(v[0], v[1])),
        ("permute", vec![vec![2, 3, 4]], |t, v| t.permute(v[0], &[2, 0, 1])),
        ("transpose", vec![vec![3, 4]], |t, v| t.transpose(v[0])),
        ("reshape", vec![vec![3, 4]], |t, v| t.reshape(v[0], &[2, 6])),
        ("concat", vec![vec![2, 3], vec![4, 3]], |t, v| t.concat(&[v[0], v[1]], 0)),
        ("slice", vec![vec![5, 3]], |t, v| t.slice(v[0], 0, 1, 3)),
        ("gather_rows", vec![vec![4, 3]], |t, v| t.gather_rows(v[0], &[2, 0, 2, 3])),
        ("mean", vec![vec![3, 4]], |t, v| t.mean(v[0])),
        ("mean_axis", vec![vec![3, 4]], |t, v| t.mean_axis(v[0], 0)),
        ("softmax", vec![vec![3, 5]], |t, v| t.softmax(v[0], 1)),
        ("layer_norm", vec![vec![3, 6], vec![6], vec![6]], |t, v| t.layer_norm(v[0], v[1], v[2])),
        ("gelu", vec![vec![4, 4]], |t, v| t.gelu(v[0])),
        ("l2_normalize", vec![vec![3, 5]], |t, v| t.l2_normalize(v[0])),
        ("mse", vec![vec![3, 4], vec![3, 4]], |t, v| t.mse(v[0], v[1])),
        ("exp", vec![vec![6]], |t, v| t.exp(v[0])),
        ("log", vec![vec![6]], |t, v| {
            let shifted = t.max_const(v[0], 0.5)?;
            t.log(shifted)
        }),
        ("relu", vec![vec![6]], |t, v| t.relu(v[0])),
        ("linear", vec![vec![3, 4], vec![4, 2], vec![2]], |t, v| t.linear(v[0], v[1], v[2])),
    ]
}

/// Autodiff against central differences for every tape operation.
pub fn tape_gradients(seed: u64, tolerance: f64) -> CheckOutcome {
    let mut rng = SeedRng::new(seed);
    let mut worst = (0.0f64, "");
    let mut failures = Vec::new();
    for (name, shapes, op) in op_cases() {
        let result = (|| -> Result<f64> {
            let inputs: Vec<Tensor<f64>> = shapes
                .iter()
                .map(|s| {
                    let t = random_tensor(&mut rng, s, -1.0, 1.0);
                    t.map(|x| if x.abs() < 0.05 { x + 0.1 } else { x })
                })
                .collect();
            let mut weight = None;
            let (_, analytic) = probe(op, &inputs, &mut weight, &mut rng)?;
            let mut err = 0.0f64;
            for (i, input) in inputs.iter().enumerate() {
                let mut numeric = vec![0.0; input.numel()];
                for (j, slot) in numeric.iter_mut().enumerate() {
                    let mut plus = inputs.clone();
                    plus[i].data_mut()[j] += FD_STEP;
                    let mut minus = inputs.clone();
                    minus[i].data_mut()[j] -= FD_STEP;
                    let fp = probe(op, &plus, &mut weight, &mut rng)?.0;
                    let fm = probe(op, &minus, &mut weight, &mut rng)?.0;
                    *slot = (fp - fm) / (2.0 * FD_STEP);
                }
                err = err.max(relative_error(&analytic[i], &numeric));
            }
            Ok(err)
        })();
        match result {
            Ok(err) => {
                if err > worst.0 {
                    worst = (err, name);
                }
                if err > tolerance {
                    failures.push(format!("{name} ({err:.2e})"));
                }
            }
            Err(e) => failures.push(format!("{name} ({e})")),
        }
    }
    let detail = if failures.is_empty() {
        format!("{} ops, worst relative error {:.2e} ({})", op_cases().len(), worst.0, worst.1)
    } else {
        format!("failed: {}", failures.join(", "))
    };
    CheckOutcome::new("tape_gradients", failures.is_empty(), detail)
}

fn random_rows(rng: &mut SeedRng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.normal()).collect()).collect()
}

/// Multi-similarity loss gradient against central differences.
pub fn ms_gradients(seed: u64, trials: usize, tolerance: f64) -> CheckOutcome {
    let mut rng = SeedRng::new(seed);
    let cfg = LossConfig::default();
    let mut worst = 0.0f64;
    let mut failed = 0;
    for _ in 0..trials {
        let m = rng.int_in(1, 4);
        let n = rng.int_in(2, 8);
        let mut sims: Vec<Vec<f64>> = Vec::with_capacity(m);
        let mut mined = Vec::with_capacity(m);
        for _ in 0..m {
            let row: Vec<f64> = (0..n).map(|_| rng.open_range(-1.0, 1.0)).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.coin(0.4)).collect();
            labels[0] = true;
            labels[n - 1] = false;
            let eps = rng.open_range(-0.5, 0.2);
            mined.push(mine_pairs(&row, &labels, eps).expect("matching lengths"));
            sims.push(row);
        }
        let Ok((_, analytic)) = ms_loss(&sims, &mined, &cfg) else {
            failed += 1;
            continue;
        };
        let mut err = 0.0f64;
        for a in 0..m {
            let mut numeric = vec![0.0; n];
            for (k, slot) in numeric.iter_mut().enumerate() {
                let mut plus = sims.clone();
                plus[a][k] += FD_STEP;
                let mut minus = sims.clone();
                minus[a][k] -= FD_STEP;
                let fp = ms_loss(&plus, &mined, &cfg).map(|r| r.0).unwrap_or(f64::NAN);
                let fm = ms_loss(&minus, &mined, &cfg).map(|r| r.0).unwrap_or(f64::NAN);
                *slot = (fp - fm) / (2.0 * FD_STEP);
            }
            err = err.max(relative_error(&analytic[a], &numeric));
        }
        if err.is_nan() || err > tolerance {
            failed += 1;
        }
        worst = worst.max(err);
    }
    CheckOutcome::new(
        "ms_gradients",
        failed == 0,
        format!("{trials} cases, {failed} over {tolerance:.0e}, worst relative error {worst:.2e}"),
    )
}

/// Fine-grained consistency hinge gradient against central differences.
/// Cases within `1e-3` of the hinge corner are redrawn.
pub fn fcs_gradients(seed: u64, trials: usize, tolerance: f64) -> CheckOutcome {
    let mut rng = SeedRng::new(seed);
    let gamma = 0.1;
    let mut worst = 0.0f64;
    let mut failed = 0;
    let mut done = 0;
    while done < trials {
        let n = rng.int_in(1, 3);
        let d = rng.int_in(2, 6);
        let inputs = [random_rows(&mut rng, n, d), random_rows(&mut rng, n, d), random_rows(&mut rng, n, d)];
        let near_corner = (0..n).any(|i| {
            let cos = |a: &[f64], b: &[f64]| {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                dot / (na * nb)
            };
            let h = cos(&inputs[0][i], &inputs[2][i]) - cos(&inputs[0][i], &inputs[1][i]) + gamma;
            h.abs() < 1e-3
        });
        if near_corner {
            continue;
        }
        done += 1;
        let eval = |x: &[Vec<Vec<f64>>; 3]| fcs_loss(&x[0], &x[1], &x[2], gamma);
        let Ok((_, grads)) = eval(&inputs) else {
            failed += 1;
            continue;
        };
        let analytic = [grads.anchor, grads.positive, grads.flipped];
        let mut a_flat = Vec::new();
        let mut n_flat = Vec::new();
        for which in 0..3 {
            for i in 0..n {
                for j in 0..d {
                    let mut plus = inputs.clone();
                    plus[which][i][j] += FD_STEP;
                    let mut minus = inputs.clone();
                    minus[which][i][j] -= FD_STEP;
                    let fp = eval(&plus).map(|r| r.0).unwrap_or(f64::NAN);
                    let fm = eval(&minus).map(|r| r.0).unwrap_or(f64::NAN);
                    a_flat.push(analytic[which][i][j]);
                    n_flat.push((fp - fm) / (2.0 * FD_STEP));
                }
            }
        }
        let err = relative_error(&a_flat, &n_flat);
        if err.is_nan() || err > tolerance {
            failed += 1;
        }
        worst = worst.max(err);
    }
    CheckOutcome::new(
        "fcs_gradients",
        failed == 0,
        format!("{trials} cases, {failed} over {tolerance:.0e}, worst relative error {worst:.2e}"),
    )
}

/// Random clip of pixel values in `[0, 1]`.
pub fn random_clip(rng: &mut SeedRng, config: &ModelConfig) -> ClipTensor {
    let s = config.image_size;
    let data: Vec<f32> = (0..config.frames * s * s * 3).map(|_| rng.uniform() as f32).collect();
    ClipTensor::new(Frames::new(config.frames, s, s, data).expect("consistent clip size"))
}

/// End-to-end encoder gradient in f64: `count` random parameter entries of
/// `sum(embedding ⊙ G)` against central differences. The per-entry error is
/// `|a − n| / max(|a|, |n|, floor)`.
pub fn encoder_gradients(seed: u64, count: usize, tolerance: f64) -> CheckOutcome {
    const FLOOR: f64 = 1e-7;
    let run = || -> Result<(f64, usize)> {
        let mut rng = SeedRng::new(seed);
        let config = ModelConfig::toy();
        let mut store: ParamStore<f64> = ParamStore::new();
        let encoder = Encoder::init(config.clone(), &mut store, &mut rng)?;
        let clips = vec![random_clip(&mut rng, &config), random_clip(&mut rng, &config)];
        let g = random_tensor(&mut rng, &[clips.len(), config.embed_dim], -1.0, 1.0);

        let objective = |store: &ParamStore<f64>, with_grad: bool| -> Result<(f64, Option<Vec<Tensor<f64>>>)> {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape, with_grad);
            let emb = encoder.forward(&mut tape, &bound, &clips)?;
            let gc = tape.constant(g.clone());
            let prod = tape.mul(emb, gc)?;
            let loss = tape.sum(prod)?;
            let value = tape.value(loss).item();
            if !with_grad {
                return Ok((value, None));
            }
            let grads = tape.backward(loss)?;
            let per_param = store
                .ids()
                .map(|id| grads.get(bound.var(id)).cloned().unwrap_or_else(|| Tensor::zeros(store.get(id).shape())))
                .collect();
            Ok((value, Some(per_param)))
        };

        let (_, grads) = objective(&store, true)?;
        let grads = grads.expect("gradients requested");
        let ids: Vec<_> = store.ids().collect();
        let mut worst = 0.0f64;
        let mut failed = 0;
        for _ in 0..count {
            let slot = rng.below(ids.len());
            let id = ids[slot];
            let j = rng.below(store.get(id).numel());
            let analytic = grads[slot].data()[j];
            let original = store.get(id).data()[j];
            store.get_mut(id).data_mut()[j] = original + FD_STEP;
            let fp = objective(&store, false)?.0;
            store.get_mut(id).data_mut()[j] = original - FD_STEP;
            let fm = objective(&store, false)?.0;
            store.get_mut(id).data_mut()[j] = original;
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR);
            if err.is_nan() || err > tolerance {
                failed += 1;
            }
            worst = worst.max(err);
        }
        Ok((worst, failed))
    };
    match run() {
        Ok((worst, failed)) => CheckOutcome::new(
            "encoder_gradients",
            failed == 0,
            format!("{count} entries, {failed} over {tolerance:.0e}, worst relative error {worst:.2e}"),
        ),
        Err(e) => CheckOutcome::new("encoder_gradients", false, e.to_string()),
    }
}

/// Brute-force TopK chamfer similarity in f64.
fn topk_reference(a: &ClipMatrix, b: &ClipMatrix, k: usize) -> f64 {
    let mut maxima: Vec<f64> = (0..a.rows())
        .map(|i| {
            (0..b.rows())
                .map(|j| a.row(i).iter().zip(b.row(j)).map(|(&x, &y)| x as f64 * y as f64).sum::<f64>())
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    maxima.sort_by(|x, y| y.total_cmp(x));
    let k = k.min(maxima.len());
    maxima[..k].iter().sum::<f64>() / k as f64
}

/// TopK-CS against a brute-force reference on random instances.
pub fn topk_oracle(seed: u64, instances: usize, tolerance: f64) -> CheckOutcome {
    let mut rng = SeedRng::new(seed);
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut failed = 0;
    for _ in 0..instances {
        let dim = rng.int_in(2, 32);
        let (n, m) = (rng.int_in(1, 12), rng.int_in(1, 12));
        let a = random_unit_matrix(&mut rng, n, dim);
        let b = random_unit_matrix(&mut rng, m, dim);
        let k = rng.int_in(1, 6);
        let err = match topk_cs(&a, &b, k) {
            Ok(v) => (v - topk_reference(&a, &b, k)).abs(),
            Err(_) => f64::INFINITY,
        };
        if err.is_nan() || err > tolerance {
            failed += 1;
        }
        worst = worst.max(err);
    }
    CheckOutcome::new(
        "topk_oracle",
        failed == 0,
        format!(
            "{instances} instances, {failed} over {tolerance:.0e}, worst {worst:.2e}, {:.2}s",
            start.elapsed().as_secs_f64()
        ),
    )
}

/// TopK-CS with `k` equal to the query length is bitwise chamfer.
pub fn reduction_identity(seed: u64, instances: usize) -> CheckOutcome {
    let mut rng = SeedRng::new(seed);
    let mut mismatches = 0;
    for _ in 0..instances {
        let dim = rng.int_in(2, 32);
        let (n, m) = (rng.int_in(1, 12), rng.int_in(1, 12));
        let a = random_unit_matrix(&mut rng, n, dim);
        let b = random_unit_matrix(&mut rng, m, dim);
        let same = match (topk_cs(&a, &b, a.rows()), chamfer(&a, &b)) {
            (Ok(x), Ok(y)) => x.to_bits() == y.to_bits(),
            _ => false,
        };
        if !same {
            mismatches += 1;
        }
    }
    CheckOutcome::new(
        "reduction_identity",
        mismatches == 0,
        format!("{instances} instances, {mismatches} bitwise mismatches"),
    )
}

/// Average precision by the textbook definition.
pub fn ap_reference(ranked: &[String], relevant: &BTreeSet<String>) -> f64 {
    let mut hits = 0usize;
    let mut total = 0.0;
    for (pos, id) in ranked.iter().enumerate() {
        if relevant.contains(id) {
            hits += 1;
            total += hits as f64 / (pos + 1) as f64;
        }
    }
    total / relevant.len() as f64
}

/// Average precision against the reference on random rankings, plus a
/// hand-computed case: relevant items at ranks 1 and 3 of 3 give 5/6.
pub fn map_oracle(seed: u64, rankings: usize) -> CheckOutcome {
    let mut rng = SeedRng::new(seed);
    let mut worst = 0.0f64;
    for _ in 0..rankings {
        let n = rng.int_in(1, 30);
        let mut ids: Vec<String> = (0..n).map(|i| format!("v{i}")).collect();
        rng.shuffle(&mut ids);
        let mut relevant: BTreeSet<String> = ids.iter().filter(|_| rng.coin(0.3)).cloned().collect();
        if rng.coin(0.3) {
            relevant.insert("absent".into());
        }
        if relevant.is_empty() {
            relevant.insert(ids[0].clone());
        }
        let got = average_precision(ids.iter().map(String::as_str), &relevant).unwrap_or(f64::NAN);
        let err = (got - ap_reference(&ids, &relevant)).abs();
        worst = if err.is_nan() { f64::INFINITY } else { worst.max(err) };
    }
    let relevant: BTreeSet<String> = ["a".to_string(), "c".to_string()].into();
    let example = average_precision(["a", "b", "c"], &relevant).unwrap_or(f64::NAN);
    let example_ok = (example - 0.83333).abs() < 1e-5;
    CheckOutcome::new(
        "map_oracle",
        worst <= 1e-12 && example_ok,
        format!("{rankings} rankings, worst {worst:.2e}, example {example:.5}"),
    )
}

/// Feature store and checkpoint encodings round-trip exactly and reject
/// every truncation.
pub fn format_roundtrip(seed: u64) -> CheckOutcome {
    let mut rng = SeedRng::new(seed);
    let mut problems = Vec::new();

    let mut index = CorpusIndex::new();
    for v in 0..5 {
        let rows = rng.int_in(1, 6);
        if index.insert(format!("video{v}"), random_unit_matrix(&mut rng, rows, 16)).is_err() {
            problems.push("insert failed".to_string());
        }
    }
    match index.encode() {
        Ok(bytes) => {
            if CorpusIndex::decode(&bytes).ok().as_ref() != Some(&index) {
                problems.push("store roundtrip differs".into());
            }
            if (0..bytes.len()).any(|cut| CorpusIndex::decode(&bytes[..cut]).is_ok()) {
                problems.push("truncated store accepted".into());
            }
            let mut bad = bytes.clone();
            bad[0] ^= 0xff;
            if CorpusIndex::decode(&bad).is_ok() {
                problems.push("bad store magic accepted".into());
            }
        }
        Err(e) => problems.push(e.to_string()),
    }

    let mut store: ParamStore<f32> = ParamStore::new();
    let built = Encoder::init(ModelConfig::toy(), &mut store, &mut rng);
    match built.and_then(|_| encode_checkpoint(&store)) {
        Ok(bytes) => {
            if decode_checkpoint(&bytes).ok().as_ref() != Some(&store) {
                problems.push("checkpoint roundtrip differs".into());
            }
            let step = (bytes.len() / 97).max(1);
            if (0..bytes.len()).step_by(step).any(|cut| decode_checkpoint(&bytes[..cut]).is_ok()) {
                problems.push("truncated checkpoint accepted".into());
            }
        }
        Err(e) => problems.push(e.to_string()),
    }

    let detail = if problems.is_empty() {
        "store and checkpoint roundtrip, truncations rejected".to_string()
    } else {
        problems.join("; ")
    };
    CheckOutcome::new("format_roundtrip", problems.is_empty(), detail)
}

/// Every check with its default size and tolerance.
pub fn run_all(seed: u64) -> Vec<CheckOutcome> {
    vec![
        tape_gradients(seed, 1e-6),
        ms_gradients(seed, 100, 1e-6),
        fcs_gradients(seed, 100, 1e-6),
        encoder_gradients(seed, 20, 1e-3),
        topk_oracle(seed, 1000, 1e-6),
        reduction_identity(seed, 200),
        map_oracle(seed, 100),
        format_roundtrip(seed),
    ]
}
