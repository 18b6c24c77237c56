use std::collections::{BTreeMap, BTreeSet};

use clipsim::clip::{ClipTensor, Frames};
use clipsim::encoder::{Encoder, ModelConfig};
use clipsim::params::ParamStore;
use clipsim::retrieval::{evaluate, rank_query, CorpusIndex, Label, Scoring, Task};
use clipsim::rng::SeedRng;
use clipsim::similarity::ClipMatrix;
use clipsim::simlearn::{shotmix_sample, CutEnd};
use clipsim::synth::{SynthConfig, SyntheticBenchmark};
use clipsim::tape::Tape;
use clipsim::tensor::Tensor;

const H: f64 = 1e-5;

fn score(a: &ClipMatrix, b: &ClipMatrix, k: usize) -> f64 {
    let mut maxima: Vec<f64> = (0..a.rows())
        .map(|i| {
            (0..b.rows())
                .map(|j| a.row(i).iter().zip(b.row(j)).map(|(x, y)| *x as f64 * *y as f64).sum::<f64>())
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    maxima.sort_by(|x, y| y.partial_cmp(x).unwrap());
    let k = k.min(maxima.len());
    maxima[..k].iter().sum::<f64>() / k as f64
}

fn brute_ranking(index: &CorpusIndex, query: &str) -> Vec<(String, f64)> {
    let q = index.get(query).unwrap();
    let mut all: Vec<(String, f64)> = index
        .iter()
        .filter(|(id, _)| *id != query)
        .map(|(id, c)| (id.to_string(), score(q, c, 3)))
        .collect();
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    all
}

#[test]
fn matmul_sum_gradient_matches_finite_differences() {
    let mut rng = SeedRng::new(11);
    let a0: Vec<f64> = (0..9).map(|_| rng.normal()).collect();
    let b0: Vec<f64> = (0..9).map(|_| rng.normal()).collect();
    let f = |a: &[f64], b: &[f64]| {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::new(vec![3, 3], a.to_vec()).unwrap());
        let y = t.leaf(Tensor::new(vec![3, 3], b.to_vec()).unwrap());
        let z = t.matmul(x, y).unwrap();
        let s = t.sum(z).unwrap();
        let g = t.backward(s).unwrap();
        (t.value(s).item(), g.get(x).unwrap().data().to_vec())
    };
    let (_, analytic) = f(&a0, &b0);
    for i in 0..9 {
        let (mut p, mut m) = (a0.clone(), a0.clone());
        p[i] += H;
        m[i] -= H;
        let numeric = (f(&p, &b0).0 - f(&m, &b0).0) / (2.0 * H);
        assert!((analytic[i] - numeric).abs() / numeric.abs().max(1e-12) <= 1e-6);
        // d/dA_ij of sum(AB) = sum_k B_jk
        let row_sum: f64 = b0[3 * (i % 3)..3 * (i % 3) + 3].iter().sum();
        assert!((analytic[i] - row_sum).abs() < 1e-12);
    }
}

fn chiral_clip(c: &ModelConfig) -> ClipTensor {
    let s = c.image_size;
    let mut data = Vec::new();
    for t in 0..c.frames {
        for y in 0..s {
            for x in 0..s {
                let on = (1 + t / 2..4 + t / 2).contains(&x) && (4..10).contains(&y);
                let ramp = x as f32 / (s - 1) as f32;
                data.extend(if on { [1.0, 0.1, 0.1] } else { [ramp, 0.5, 1.0 - ramp] });
            }
        }
    }
    ClipTensor::new(Frames::new(c.frames, s, s, data).unwrap())
}

#[test]
fn encoder_separates_a_clip_from_its_mirror() {
    let mut store = ParamStore::<f32>::new();
    let enc = Encoder::init(ModelConfig::toy(), &mut store, &mut SeedRng::new(42)).unwrap();
    let clip = chiral_clip(enc.config());
    let a = enc.encode_clip(&store, &clip).unwrap();
    let b = enc.encode_clip(&store, &clip.hflip()).unwrap();
    let cos: f32 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    assert!(cos < 1.0 - 1e-3, "cos = {cos}");
}

#[test]
fn encoder_weight_gradient_matches_finite_differences() {
    let mut rng = SeedRng::new(12);
    let config = ModelConfig::toy();
    let mut store = ParamStore::<f64>::new();
    let enc = Encoder::init(config.clone(), &mut store, &mut rng).unwrap();
    let s = config.image_size;
    let data = (0..config.frames * s * s * 3).map(|_| rng.uniform() as f32).collect();
    let clips = [ClipTensor::new(Frames::new(config.frames, s, s, data).unwrap())];
    let f = |store: &ParamStore<f64>, grad: bool| {
        let mut t = Tape::new();
        let p = store.bind(&mut t, grad);
        let e = enc.forward(&mut t, &p, &clips).unwrap();
        let out = t.sum(e).unwrap();
        let g = grad.then(|| {
            let g = t.backward(out).unwrap();
            store.ids().map(|id| g.get(p.var(id)).unwrap().clone()).collect::<Vec<_>>()
        });
        (t.value(out).item(), g)
    };
    let grads = f(&store, true).1.unwrap();
    let ids: Vec<_> = store.ids().collect();
    let mut checked = 0;
    while checked < 10 {
        let slot = rng.below(ids.len());
        let j = rng.below(store.get(ids[slot]).numel());
        let analytic = grads[slot].data()[j];
        if analytic.abs() < 1e-6 {
            continue;
        }
        checked += 1;
        let orig = store.get(ids[slot]).data()[j];
        store.get_mut(ids[slot]).data_mut()[j] = orig + H;
        let fp = f(&store, false).0;
        store.get_mut(ids[slot]).data_mut()[j] = orig - H;
        let fm = f(&store, false).0;
        store.get_mut(ids[slot]).data_mut()[j] = orig;
        let numeric = (fp - fm) / (2.0 * H);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
        assert!(rel <= 1e-5, "{}[{j}]: {analytic} vs {numeric}", store.name(ids[slot]));
    }
}

#[test]
fn overlap_is_exact_when_cut_avoids_it() {
    let mut rng = SeedRng::new(13);
    let f = 8;
    let mut seen = 0;
    for draw in 0..2000 {
        let spec = shotmix_sample(16 + draw % 50, f, &mut rng).unwrap();
        let overlap = (spec.ratio * f as f64).ceil() as usize;
        let anchor: BTreeSet<usize> = (spec.anchor_start..spec.anchor_start + f).collect();
        let positive: Vec<usize> = spec.positive_indices();
        let cut: BTreeSet<usize> = (spec.cut_start..spec.cut_start + spec.cut_len).collect();
        let overwritten: Vec<usize> = match spec.cut_end {
            CutEnd::Begin => (spec.positive_start..spec.positive_start + spec.cut_len).collect(),
            CutEnd::End => (spec.positive_start + f - spec.cut_len..spec.positive_start + f).collect(),
        };
        if overwritten.iter().any(|i| anchor.contains(i)) || cut.iter().any(|i| anchor.contains(i)) {
            continue;
        }
        seen += 1;
        let shared = positive.iter().filter(|i| anchor.contains(i)).count();
        assert_eq!(shared, overlap, "{spec:?}");
    }
    assert!(seen > 500);
}

#[test]
fn random_corpus_ranking_matches_brute_force() {
    let mut rng = SeedRng::new(14);
    let mut index = CorpusIndex::new();
    for v in 0..10 {
        let rows = rng.int_in(1, 9);
        let data: Vec<f32> = (0..rows * 8).map(|_| rng.normal() as f32).collect();
        index.insert(format!("v{v}"), ClipMatrix::normalized(rows, 8, data).unwrap()).unwrap();
    }
    for q in 0..10 {
        let q = format!("v{q}");
        let got = rank_query(&index, &q, 3).unwrap();
        let want = brute_ranking(&index, &q);
        let got_ids: Vec<&str> = got.ids().collect();
        let want_ids: Vec<&str> = want.iter().map(|(id, _)| id.as_str()).collect();
        assert_eq!(got_ids, want_ids);
        for ((_, a), (_, b)) in got.entries.iter().zip(&want) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}

fn labels_for(task: Task) -> &'static [Label] {
    match task {
        Task::Dsvr => &[Label::ND, Label::DS],
        Task::Csvr => &[Label::ND, Label::DS, Label::CS],
        Task::Isvr => &[Label::ND, Label::DS, Label::CS, Label::IS],
    }
}

#[test]
fn benchmark_map_matches_brute_force_evaluator() {
    let bench = SyntheticBenchmark::generate(&SynthConfig::default()).unwrap();
    let mut store = ParamStore::<f32>::new();
    let enc = Encoder::init(ModelConfig::toy(), &mut store, &mut SeedRng::new(42)).unwrap();
    let index = CorpusIndex::build(&enc, &store, &bench.videos).unwrap();
    let rankings: BTreeMap<&String, Vec<(String, f64)>> =
        bench.annotations.queries.keys().map(|q| (q, brute_ranking(&index, q))).collect();
    for task in Task::ALL {
        let mut aps = Vec::new();
        for (q, labels) in &bench.annotations.queries {
            let relevant: BTreeSet<&String> =
                labels.iter().filter(|(_, l)| labels_for(task).contains(l)).map(|(id, _)| id).collect();
            let mut hits = 0.0;
            let mut sum = 0.0;
            for (rank, (id, _)) in rankings[q].iter().enumerate() {
                if relevant.contains(id) {
                    hits += 1.0;
                    sum += hits / (rank + 1) as f64;
                }
            }
            aps.push(sum / relevant.len() as f64);
        }
        let want = aps.iter().sum::<f64>() / aps.len() as f64;
        let got = evaluate(&index, &bench.annotations, task, Scoring::TopK(3)).unwrap().mean_ap;
        assert!((got - want).abs() <= 1e-9, "{}: {got} vs {want}", task.name());
    }
}
