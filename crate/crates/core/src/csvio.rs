//! CSV writers for trace and map exports: '.' decimal, comma separator,
//! header row, no timestamps. Formatting is deterministic so identical runs
//! produce identical bytes.

use crate::action::{ActionCommand, ACTION_LABELS};
use crate::spinal::ActivityTrace;
use crate::tensor::Tensor;
use std::fmt::Write as _;

type T64 = Tensor<f64>;

fn fmt(v: f64) -> String {
    // Shortest round-trip float formatting; stable for identical inputs.
    format!("{v}")
}

/// step,layer,rate
pub fn activity_csv(trace: &ActivityTrace) -> String {
    let mut out = String::from("step,layer,rate\n");
    for (i, s) in trace.steps.iter().enumerate() {
        for (l, &r) in s.block_rates.iter().enumerate() {
            let _ = writeln!(out, "{i},{l},{}", fmt(r));
        }
    }
    out
}

/// step,layer,neuron,rate — per-neuron window rates.
pub fn neuron_activity_csv(trace: &ActivityTrace) -> String {
    let mut out = String::from("step,layer,neuron,rate\n");
    for (i, s) in trace.steps.iter().enumerate() {
        for l in 0..s.neuron_rates.rows() {
            for n in 0..s.neuron_rates.cols() {
                let _ = writeln!(out, "{i},{l},{n},{}", fmt(s.neuron_rates.at2(l, n)));
            }
        }
    }
    out
}

/// query,token,weight — attention map rows.
pub fn attention_csv(attn: &T64) -> String {
    let mut out = String::from("query,token,weight\n");
    for q in 0..attn.rows() {
        for t in 0..attn.cols() {
            let _ = writeln!(out, "{q},{t},{}", fmt(attn.at2(q, t)));
        }
    }
    out
}

/// dim,neuron,rate,defined — kinematic dominance map.
pub fn kinematic_map_csv(map: &T64, defined: &[bool]) -> String {
    let mut out = String::from("dim,neuron,rate,defined\n");
    for d in 0..map.rows() {
        for n in 0..map.cols() {
            let _ = writeln!(
                out,
                "{},{n},{},{}",
                ACTION_LABELS[d],
                fmt(map.at2(d, n)),
                defined[d]
            );
        }
    }
    out
}

/// tick,pose...,wrench...,action...,phase — episode log.
pub fn episode_csv(
    poses: &[[f64; 6]],
    wrenches: &[[f64; 6]],
    actions: &[ActionCommand],
    labels: &[String],
) -> String {
    let mut out = String::from(
        "tick,x,y,z,phi,theta,psi,fx,fy,fz,tx,ty,tz,dx,dy,dz,dphi,dtheta,dpsi,gripper,phase\n",
    );
    for i in 0..poses.len() {
        let mut row = format!("{i}");
        for v in poses[i] {
            let _ = write!(row, ",{}", fmt(v));
        }
        for v in wrenches[i] {
            let _ = write!(row, ",{}", fmt(v));
        }
        for v in actions[i].to_vec() {
            let _ = write!(row, ",{}", fmt(v));
        }
        let _ = writeln!(out, "{row},{}", labels[i]);
    }
    out
}

/// epoch,loss — training curve.
pub fn loss_csv(curve: &[f64]) -> String {
    let mut out = String::from("epoch,loss\n");
    for (i, l) in curve.iter().enumerate() {
        let _ = writeln!(out, "{i},{}", fmt(*l));
    }
    out
}

/// t,fx,fy,fz,tx,ty,tz,triggered,rx,ry,rz — wrench/trigger log.
pub fn wrench_log_csv(rows: &[(usize, [f64; 6], bool, [f64; 3])]) -> String {
    let mut out = String::from("t,fx,fy,fz,tx,ty,tz,triggered,rx,ry,rz\n");
    for (t, w, trig, r) in rows {
        let mut row = format!("{t}");
        for v in w {
            let _ = write!(row, ",{}", fmt(*v));
        }
        let _ = write!(row, ",{}", if *trig { 1 } else { 0 });
        for v in r {
            let _ = write!(row, ",{}", fmt(*v));
        }
        let _ = writeln!(out, "{row}");
    }
    out
}
