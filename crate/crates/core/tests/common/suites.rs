//! Checks shared by the property tests and the acceptance runner. Each
//! returns `Ok(detail)` on success and `Err(detail)` on failure.

use capsad_core::anomaly::roc;
use capsad_core::capsnet::{self, NetworkParams};
use capsad_core::data::{self as idx, Dataset};
use capsad_core::numerics::{Graph, Tensor};
use capsad_core::Label;
use rand::Rng;

use super::*;

pub type Check = std::result::Result<String, String>;

pub fn gradient_suite() -> Check {
    let mut worst_prim = ("", 0.0f64);
    for seed in [1, 2] {
        for (name, err) in primitive_grad_errors(seed) {
            if err > worst_prim.1 {
                worst_prim = (name, err);
            }
        }
    }
    let mut r = rng(7);
    let mut worst_composed: f64 = 0.0;
    let mut checked = 0;
    for (i, label) in [Label::Normal, Label::Anomaly].into_iter().enumerate() {
        let mut params = NetworkParams::<f64>::init(reduced_scale(), 11 + i as u64).unwrap();
        for t in params.tensors_mut() {
            if t.shape().len() == 1 {
                t.data_mut().iter_mut().for_each(|b| *b = r.gen_range(-0.1..0.1));
            }
        }
        let ex = random_example(label, &mut r);
        let c = composed_grad_check(&params, &ex, 12, 100 + i as u64);
        worst_composed = worst_composed.max(c.max_rel_err);
        checked += c.checked;
    }
    let detail = format!(
        "primitives max rel err {:.2e} ({}), composed {:.2e} over {checked} coordinates",
        worst_prim.1, worst_prim.0, worst_composed
    );
    if worst_prim.1 < 1e-5 && worst_composed < 1e-4 && checked >= 100 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

pub fn squash_suite() -> Check {
    let mut r = rng(21);
    let mut rows = Vec::new();
    for _ in 0..1000 {
        let dim = r.gen_range(1..=16);
        let dir: Vec<f64> = (0..dim).map(|_| r.gen_range(-1.0..1.0)).collect();
        let target = 10f64.powf(r.gen_range(-3.0..3.0));
        let k = target / norm(&dir).max(1e-12);
        let v: Vec<f64> = dir.iter().map(|x| x * k).collect();
        let s = capsnet::squash(&v);
        let (nv, ns) = (norm(&v), norm(&s));
        if ns >= 1.0 {
            return Err(format!("output norm {ns} for input norm {nv}"));
        }
        let cos = v.iter().zip(&s).map(|(a, b)| a * b).sum::<f64>() / (nv * ns);
        if cos < 1.0 - 1e-6 {
            return Err(format!("cosine {cos} for input norm {nv}"));
        }
        let oracle = norm(&squash_oracle(&v));
        if (ns - oracle).abs() > 1e-6 {
            return Err(format!("norm {ns} vs direct formula {oracle}"));
        }
        rows.push((nv, ns));
    }
    rows.sort_by(|a, b| a.0.total_cmp(&b.0));
    if let Some(w) = rows.windows(2).find(|w| w[1].1 < w[0].1) {
        return Err(format!("not monotone: {:?} then {:?}", w[0], w[1]));
    }
    let zero = capsnet::squash(&[0.0f64; 8]);
    if zero.iter().any(|&x| x != 0.0) {
        return Err(format!("squash(0) = {zero:?}"));
    }
    let mut unit: Vec<f64> = (0..8).map(|_| r.gen_range(-1.0..1.0)).collect();
    let n = norm(&unit);
    unit.iter_mut().for_each(|x| *x /= n);
    let half = norm(&capsnet::squash(&unit));
    if (half - 0.5).abs() > 1e-6 {
        return Err(format!("unit input gives norm {half}"));
    }
    Ok(format!("1000 vectors, unit input norm {half:.9}"))
}

fn random_predictions(n: usize, outputs: usize, dim: usize, r: &mut rand_chacha::ChaCha8Rng) -> Vec<Vec<Vec<f64>>> {
    (0..n)
        .map(|_| (0..outputs).map(|_| (0..dim).map(|_| r.gen_range(-1.0..1.0)).collect()).collect())
        .collect()
}

fn to_tensor(uhat: &[Vec<Vec<f64>>]) -> Tensor<f64> {
    let shape = vec![uhat.len(), uhat[0].len(), uhat[0][0].len()];
    Tensor::new(shape, uhat.iter().flatten().flatten().copied().collect()).unwrap()
}

/// Couplings of every iteration and the output capsules of the library routing.
pub fn library_routing(uhat: &[Vec<Vec<f64>>], iterations: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let t = to_tensor(uhat);
    let mut g = Graph::<f64>::new();
    let p = g.param(&t);
    let routing = capsnet::routing_by_agreement(&mut g, p, iterations).unwrap();
    let v = g.value(routing.digit_caps).unwrap().data().to_vec();
    let dim = uhat[0][0].len();
    let caps = v.chunks(dim).map(<[f64]>::to_vec).collect();
    let couplings = routing.couplings.iter().map(|&c| g.value(c).unwrap().data().to_vec()).collect();
    (caps, couplings)
}

pub fn routing_suite() -> Check {
    let mut r = rng(31);
    let mut worst: f64 = 0.0;
    for trial in 0..200 {
        let dim = r.gen_range(2..=8);
        let iterations = r.gen_range(1..=5);
        let scale = r.gen_range(0.2..4.0);
        let uhat: Vec<Vec<Vec<f64>>> = random_predictions(5, 2, dim, &mut r)
            .into_iter()
            .map(|row| row.into_iter().map(|p| p.into_iter().map(|x| x * scale).collect()).collect())
            .collect();
        let (caps, couplings) = library_routing(&uhat, iterations);
        if couplings.len() != iterations {
            return Err(format!("{} coupling snapshots for {iterations} iterations", couplings.len()));
        }
        for (it, c) in couplings.iter().enumerate() {
            for row in c.chunks(2) {
                let s: f64 = row.iter().sum();
                if (s - 1.0).abs() > 1e-6 {
                    return Err(format!("trial {trial} iteration {it}: coupling row sums to {s}"));
                }
            }
        }
        if iterations == 1 && couplings[0].iter().any(|&c| c != 0.5) {
            return Err(format!("one-iteration couplings {:?}", couplings[0]));
        }
        let (oracle_caps, oracle_c) = routing_oracle(&uhat, iterations);
        for (a, b) in caps.iter().flatten().zip(oracle_caps.iter().flatten()) {
            worst = worst.max((a - b).abs());
        }
        for (c, oc) in couplings.iter().zip(&oracle_c) {
            for (a, b) in c.iter().zip(oc.iter().flatten()) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    let (_, one) = library_routing(&random_predictions(1152, 2, 16, &mut r), 1);
    if one[0].iter().any(|&c| c != 0.5) {
        return Err("one-iteration couplings at full size are not 0.5".into());
    }
    if worst > 1e-6 {
        return Err(format!("max deviation from loop oracle {worst:.2e}"));
    }
    Ok(format!("200 random 5x2 instances, max deviation from loop oracle {worst:.2e}"))
}

pub fn random_scored_instance(r: &mut rand_chacha::ChaCha8Rng) -> (Vec<f64>, Vec<Label>) {
    let n = r.gen_range(2..=50);
    // coarse grids produce ties
    let levels = [5.0, 20.0, 1e6][r.gen_range(0..3)];
    let mut labels: Vec<Label> =
        (0..n).map(|_| if r.gen_bool(0.5) { Label::Anomaly } else { Label::Normal }).collect();
    labels[0] = Label::Normal;
    labels[1] = Label::Anomaly;
    let scores = (0..n).map(|_| (r.gen_range(-1.0f64..2.0) * levels).round() / levels).collect();
    (scores, labels)
}

pub fn auc_suite() -> Check {
    let mut r = rng(41);
    let mut worst: f64 = 0.0;
    for _ in 0..2000 {
        let (scores, labels) = random_scored_instance(&mut r);
        let auc = roc(&scores, &labels).map_err(|e| e.to_string())?.auc;
        worst = worst.max((auc - concordance_oracle(&scores, &labels)).abs());
    }
    if worst <= 1e-9 {
        Ok(format!("2000 instances, max |trapezoid - concordance| {worst:.1e}"))
    } else {
        Err(format!("max |trapezoid - concordance| {worst:.3e}"))
    }
}

/// `[2, 2, 3]` unsigned bytes 1..=12.
pub const IMAGE_FIXTURE: [u8; 28] = [0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 3, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12];
/// Four labels.
pub const LABEL_FIXTURE: [u8; 12] = [0, 0, 8, 1, 0, 0, 0, 4, 3, 1, 4, 9];

pub fn idx_suite() -> Check {
    let img = idx::parse_idx(&IMAGE_FIXTURE).map_err(|e| e.to_string())?;
    if img.dtype != idx::IDX_UBYTE || img.shape != [2, 2, 3] || img.data != (1..=12).collect::<Vec<u8>>() {
        return Err(format!("image fixture parsed as {img:?}"));
    }
    let lab = idx::parse_idx(&LABEL_FIXTURE).map_err(|e| e.to_string())?;
    if lab.shape != [4] || lab.data != [3, 1, 4, 9] {
        return Err(format!("label fixture parsed as {lab:?}"));
    }
    let mut bad = IMAGE_FIXTURE;
    bad[1] = 1;
    if idx::parse_idx(&bad).is_ok() || idx::parse_idx(&IMAGE_FIXTURE[..27]).is_ok() {
        return Err("malformed fixture accepted".into());
    }
    let root = data_root();
    if !root.join("mnist").is_dir() {
        return Ok(format!("fixtures ok; official files not fetched under {}", root.display()));
    }
    let (train, test) = idx::load_dataset(&root, Dataset::Mnist).map_err(|e| e.to_string())?;
    for (set, n) in [(&train, 60000), (&test, 10000)] {
        if set.images.shape() != [n, 28, 28] || set.labels.len() != n {
            return Err(format!("{:?}: images {:?}, {} labels", set.split, set.images.shape(), set.labels.len()));
        }
        let max = set.labels.iter().copied().max().unwrap_or(0);
        let counts = set.class_counts();
        if max > 9 || counts.iter().any(|&c| c == 0) {
            return Err(format!("{:?}: label counts {counts:?}", set.split));
        }
    }
    Ok("fixtures ok; official MNIST 60000/10000 x 28x28, labels 0-9".into())
}
