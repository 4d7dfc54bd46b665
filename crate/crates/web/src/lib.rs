//! Browser bindings for three small interactive views: polytope bounds of a
//! random ReLU network, the proto-action lattice, and zero-forcing rates.
//! Every export returns a JSON string (or an error string).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use wasm_bindgen::prelude::*;

use mumimo_lab::channel::{norm_sqr, sinr_and_rates, single_user_max_rate, zf_beamformer, FadingProcess};
use mumimo_lab::env::{action_count, decode_action, ActionIndex, ProtoLattice};
use mumimo_lab::ndiff::{MlpParams, OutputActivation, Tensor};
use mumimo_lab::polytope::{interval_bounds, propagate_bounds, BoxBounds};

fn err(e: impl std::fmt::Display) -> JsValue {
    JsValue::from_str(&e.to_string())
}

/// Random two-input ReLU network with `hidden` units per layer, bounded over
/// the box `[x0 ± width/2] × [x1 ± width/2]`, against interval arithmetic and
/// 2000 sampled outputs.
#[wasm_bindgen]
pub fn bound_net(seed: u32, hidden: u32, x0: f64, x1: f64, width: f64) -> Result<String, JsValue> {
    bound_net_json(seed as u64, hidden as usize, x0, x1, width).map_err(err)
}

pub fn bound_net_json(seed: u64, hidden: usize, x0: f64, x1: f64, width: f64) -> mumimo_lab::Result<String> {
    if hidden == 0 || hidden > 64 || !(width >= 0.0) {
        return Err(mumimo_lab::Error::Config("need 1..=64 hidden units and a non-negative width".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = MlpParams::init(&[2, hidden, hidden, 1], OutputActivation::Identity, 1.0, &mut rng);
    for l in &mut net.layers {
        l.bias.iter_mut().for_each(|b| *b = rng.gen_range(-0.5..0.5));
    }
    let h = width / 2.0;
    let bx = BoxBounds::new(vec![x0 - h, x1 - h], vec![x0 + h, x1 + h])?;
    let poly = propagate_bounds(&net, &bx)?;
    let (ilo, ihi) = interval_bounds(&net, &bx)?;
    let xs: Vec<Vec<f64>> = (0..2000)
        .map(|_| (0..2).map(|d| if h > 0.0 { rng.gen_range(bx.lower()[d]..=bx.upper()[d]) } else { bx.lower()[d] }).collect())
        .collect();
    let ys = net.forward_batch(&Tensor::from_rows(&xs));
    let (smin, smax) = ys.data().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &y| (a.min(y), b.max(y)));
    let unstable: usize = poly.layers.lower[..poly.layers.lower.len() - 1]
        .iter()
        .zip(&poly.layers.upper)
        .map(|(l, u)| l.iter().zip(u).filter(|(l, u)| **l < 0.0 && **u > 0.0).count())
        .sum();
    Ok(json!({
        "polytope": [poly.lower[0], poly.upper[0]],
        "interval": [ilo[0], ihi[0]],
        "samples": [smin, smax],
        "unstable": unstable,
    })
    .to_string())
}

/// The `k` nearest valid actions to `(u0, u1)` on the two-dimensional lattice
/// of `users` choose at most `max_selected`.
#[wasm_bindgen]
pub fn nearest_actions(users: u32, max_selected: u32, u0: f64, u1: f64, k: u32) -> Result<String, JsValue> {
    nearest_actions_json(users as usize, max_selected as usize, u0, u1, k as usize).map_err(err)
}

pub fn nearest_actions_json(users: usize, max_selected: usize, u0: f64, u1: f64, k: usize) -> mumimo_lab::Result<String> {
    if users == 0 || users > 16 || max_selected == 0 || max_selected > users {
        return Err(mumimo_lab::Error::Config("need 1 <= max_selected <= users <= 16".into()));
    }
    let lat = ProtoLattice::new(action_count(users, max_selected), 2);
    let points: Vec<&[f64]> = (0..lat.action_count()).map(|a| lat.point(ActionIndex(a))).collect();
    let nn = lat
        .knn(&[u0, u1], k)
        .into_iter()
        .map(|(a, d)| Ok(json!({ "action": a.0, "users": decode_action(a, users, max_selected)?.members(), "distance": d })))
        .collect::<mumimo_lab::Result<Vec<_>>>()?;
    Ok(json!({ "points_per_dim": lat.points_per_dim(), "points": points, "nearest": nn }).to_string())
}

/// Zero-forcing rates of `selected` (comma separated user indices) on a
/// seeded Rayleigh draw, next to each user's single-user rate.
#[wasm_bindgen]
pub fn zf_rates(seed: u32, users: u32, antennas: u32, selected: &str, snr_db: f64) -> Result<String, JsValue> {
    zf_rates_json(seed as u64, users as usize, antennas as usize, selected, snr_db).map_err(err)
}

pub fn zf_rates_json(seed: u64, users: usize, antennas: usize, selected: &str, snr_db: f64) -> mumimo_lab::Result<String> {
    if users == 0 || antennas == 0 || users > 32 || antennas > 32 {
        return Err(mumimo_lab::Error::Config("need 1..=32 users and antennas".into()));
    }
    let mut members: Vec<usize> = selected
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse().map_err(|_| mumimo_lab::Error::Config(format!("bad user index {s:?}"))))
        .collect::<mumimo_lab::Result<_>>()?;
    members.sort_unstable();
    members.dedup();
    if members.iter().any(|&u| u >= users) {
        return Err(mumimo_lab::Error::Config("user index out of range".into()));
    }
    let mut cfg = mumimo_lab::env::EnvConfig::default();
    (cfg.num_users, cfg.num_antennas) = (users, antennas);
    let h = FadingProcess::new(cfg.channel(seed))?.state().true_csi;
    let noise = 10f64.powf(-snr_db / 10.0);
    let rates = sinr_and_rates(&h, &h, &members, 1.0, noise);
    let single: Vec<f64> = (0..users).map(|u| single_user_max_rate(&h.column(u), 1.0, noise)).collect();
    let feasible = members.is_empty() || zf_beamformer(&h.select_columns(&members)).is_ok();
    Ok(json!({
        "users": members,
        "rates": rates,
        "sum_rate": rates.iter().sum::<f64>(),
        "single_user": single,
        "feasible": feasible,
        "gains": (0..users).map(|u| norm_sqr(&h.column(u))).collect::<Vec<_>>(),
    })
    .to_string())
}
