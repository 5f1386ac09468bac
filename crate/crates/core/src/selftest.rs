//! Built-in oracle suite, run by the `selftest` subcommand.
//!
//! Each check compares a production routine against an independent
//! brute-force computation on seeded random inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::gradcheck::check_params;
use crate::autograd::Graph;
use crate::config::Config;
use crate::error::Result;
use crate::events::{voxelize, EventRecord, EventStream};
use crate::frame::Frame;
use crate::livt::{local_attention, select_timestamps};
use crate::model::{EvEnhancer, ModelInput};
use crate::nn::{InitScheme, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

pub type Check = fn() -> Result<CheckOutcome>;

pub const CHECKS: [(&str, Check); 4] = [
    ("voxel_mass", voxel_mass),
    ("temporal_selection", temporal_selection),
    ("dense_attention", dense_attention),
    ("gradients", gradients),
];

/// Run every check; an `Err` from a check counts as a failure.
pub fn run_all() -> Vec<CheckOutcome> {
    CHECKS.iter().map(|&(name, f)| f().unwrap_or_else(|e| CheckOutcome { name, passed: false, detail: e.to_string() })).collect()
}

pub(crate) fn random_stream(n: usize, h: usize, w: usize, seed: u64) -> EventStream {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let ev = (0..n)
        .map(|_| EventRecord::new(r.gen(), r.gen_range(0..w as u32), r.gen_range(0..h as u32), if r.gen() { 1 } else { -1 }))
        .collect();
    EventStream::new(ev).expect("generated events are valid")
}

/// Per-event, per-bin tent weights on the 2^-20 position lattice.
pub(crate) fn voxel_oracle(events: &EventStream, h: usize, w: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; (m + 1) * h * w];
    let scale = (1u64 << crate::events::WEIGHT_BITS) as f64;
    for e in events.records() {
        let u = (e.t * m as f64 * scale).round_ties_even() / scale;
        for b in 0..=m {
            let wt = 1.0 - (u - b as f64).abs();
            if wt > 0.0 {
                out[(b * h + e.y as usize) * w + e.x as usize] += e.p as f64 * wt;
            }
        }
    }
    out
}

fn voxel_mass() -> Result<CheckOutcome> {
    let (h, w, m) = (16, 16, 7);
    let s = random_stream(1000, h, w, 1);
    let v = voxelize(&s, h, w, m)?;
    let same = v.data() == voxel_oracle(&s, h, w, m).as_slice();
    let mass = v.total_mass() == s.polarity_sum() as f64;
    Ok(CheckOutcome {
        name: "voxel_mass",
        passed: same && mass,
        detail: format!("matches brute force: {same}, mass {} vs polarity sum {}", v.total_mass(), s.polarity_sum()),
    })
}

/// Minimizing size-`tg` subset by exhaustive enumeration; ties go to the
/// lexicographically first subset.
pub(crate) fn selection_oracle(target: f64, stamps: &[f64], tg: usize) -> Vec<f64> {
    let n = stamps.len();
    let mut best: Option<(f64, Vec<usize>)> = None;
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != tg {
            continue;
        }
        let idx: Vec<usize> = (0..n).filter(|i| mask >> i & 1 == 1).collect();
        let cost: f64 = idx.iter().map(|&i| (stamps[i] - target).abs()).sum();
        let better = match &best {
            None => true,
            Some((c, b)) => cost < c - 1e-12 || (cost <= c + 1e-12 && idx < *b),
        };
        if better {
            best = Some((cost, idx));
        }
    }
    best.map(|(_, idx)| idx.iter().map(|&i| stamps[i]).collect()).unwrap_or_default()
}

fn temporal_selection() -> Result<CheckOutcome> {
    let mut cases = 0;
    let mut bad = Vec::new();
    for m in [3usize, 5, 7] {
        let stamps: Vec<f64> = (0..m + 2).map(|k| k as f64 / (m + 1) as f64).collect();
        for tg in 1..=3 {
            for k in 0..=100 {
                let target = k as f64 / 100.0;
                cases += 1;
                if select_timestamps(target, &stamps, tg)? != selection_oracle(target, &stamps, tg) {
                    bad.push(format!("M={m} T_G={tg} target={target}"));
                }
            }
        }
    }
    Ok(CheckOutcome {
        name: "temporal_selection",
        passed: bad.is_empty(),
        detail: format!("{} of {cases} cases differ {bad:?}", bad.len()),
    })
}

fn uniform(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0))
}

fn dense_attention() -> Result<CheckOutcome> {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let (n, j, c, slices) = (4, 9, 8, 3);
    let q = uniform(&[n, c], &mut r);
    let kvb: Vec<(Tensor, Tensor, Tensor)> =
        (0..slices).map(|_| (uniform(&[n, j, c], &mut r), uniform(&[n, j, c], &mut r), uniform(&[n, j], &mut r))).collect();
    let g = Graph::detached();
    let vars: Vec<_> = kvb.iter().map(|(k, v, b)| (g.constant(k.clone()), g.constant(v.clone()), g.constant(b.clone()))).collect();
    let got = local_attention(g.constant(q.clone()), &vars)?;
    let mut worst: f64 = 0.0;
    let mut worst_row: f64 = 0.0;
    for a in 0..n {
        for (si, (k, v, b)) in kvb.iter().enumerate() {
            let logits: Vec<f64> = (0..j)
                .map(|p| (0..c).map(|ch| q.get(&[a, ch]) * k.get(&[a, p, ch])).sum::<f64>() / (c as f64).sqrt() + b.get(&[a, p]))
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            let weights: Vec<f64> = logits.iter().map(|l| l.exp() / z).collect();
            worst_row = worst_row.max((weights.iter().sum::<f64>() - 1.0).abs());
            for ch in 0..c {
                let want: f64 = (0..j).map(|p| weights[p] * v.get(&[a, p, ch])).sum();
                worst = worst.max((got.value().get(&[a, si * c + ch]) - want).abs());
            }
        }
    }
    Ok(CheckOutcome {
        name: "dense_attention",
        passed: worst < 1e-5 && worst_row < 1e-6,
        detail: format!("max abs error {worst:.2e}, row-sum error {worst_row:.2e}"),
    })
}

fn gradients() -> Result<CheckOutcome> {
    let mut cfg = Config::toy();
    cfg.model.channels = 4;
    cfg.model.res_blocks = 1;
    cfg.livt.channels = 4;
    cfg.livt.frequencies = 2;
    cfg.livt.mlp_hidden = vec![8, 8];
    cfg.livt.local_grid = [3, 3, 3];
    let mut store = ParamStore::new();
    let model = EvEnhancer::new(&mut store, &cfg, InitScheme::Dense)?;
    let (h, w) = (4, 4);
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let mut frame = || Frame::from_fn(h, w, |_, _| [r.gen(), r.gen(), r.gen()]);
    let (a, b) = (frame(), frame());
    let input = ModelInput::new(a, b, voxelize(&random_stream(64, h, w, 6), h, w, cfg.model.segments)?);
    let ids: Vec<_> = store.ids().collect();
    let picks: Vec<_> = ids.iter().step_by(5).map(|&id| (id, store.get(id).len() / 2)).collect();
    let (model, input) = (&model, &input);
    let check = check_params(&mut store, &picks, 1e-5, 1e-4, |g| {
        let e = model.embed(g, input)?;
        Ok(model.decode(&e, 0.4, 2.0, 0.5, &[(0, 0), (3, 5), (7, 7)])?.square().sum())
    })?;
    Ok(CheckOutcome {
        name: "gradients",
        passed: check.passed == check.checked,
        detail: format!("{}/{} parameter entries agree, worst relative error {:.2e}", check.passed, check.checked, check.worst),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes() {
        for o in run_all() {
            assert!(o.passed, "{}: {}", o.name, o.detail);
        }
    }

    #[test]
    fn selection_oracle_breaks_ties_early() {
        let g = [0.0, 0.25, 0.5, 0.75, 1.0];
        assert_eq!(selection_oracle(0.5, &g, 2), vec![0.25, 0.5]);
        assert_eq!(selection_oracle(0.9, &g, 1), vec![1.0]);
    }
}
