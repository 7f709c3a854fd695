// SPDX-License-Identifier: MIT OR Apache-2.0

//! Residual-stream injection, a toy residual model, and strength sweeps.
//!
//! An injection adds a scaled residual-space vector after a block's residual
//! update: `h' = h + alpha * v`.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::FacetId;
use crate::error::{Error, Result};
use crate::linalg::{dot, norm, Mat};
use crate::util::{fmt_sig6, seeded_rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionEntry {
    pub layer: usize,
    pub vector: Vec<f64>,
    pub alpha: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub facet: Option<FacetId>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InjectionPlan {
    entries: Vec<InjectionEntry>,
}

impl InjectionPlan {
    pub fn new(entries: Vec<InjectionEntry>) -> Result<Self> {
        let mut plan = Self::default();
        for e in entries {
            plan.push(e)?;
        }
        Ok(plan)
    }

    pub fn empty() -> Self {
        Self::default()
    }

    /// One entry at a single layer.
    pub fn single_layer(layer: usize, vector: Vec<f64>, alpha: f64, facet: Option<FacetId>) -> Result<Self> {
        Self::new(vec![InjectionEntry {
            layer,
            vector,
            alpha,
            facet,
        }])
    }

    /// The same vector and strength at every layer (CAA comparison mode).
    pub fn every_layer(n_layers: usize, vector: &[f64], alpha: f64, facet: Option<FacetId>) -> Result<Self> {
        Self::new(
            (0..n_layers)
                .map(|layer| InjectionEntry {
                    layer,
                    vector: vector.to_vec(),
                    alpha,
                    facet,
                })
                .collect(),
        )
    }

    pub fn push(&mut self, e: InjectionEntry) -> Result<()> {
        if !e.alpha.is_finite() || e.vector.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("injection vector at layer {}", e.layer)));
        }
        if let Some(first) = self.entries.first() {
            if first.vector.len() != e.vector.len() {
                return Err(Error::DimensionMismatch {
                    what: "injection vector",
                    expected: first.vector.len(),
                    actual: e.vector.len(),
                });
            }
        }
        if self.entries.iter().any(|o| o.layer == e.layer && o.facet == e.facet) {
            return Err(Error::Invariant(format!(
                "two injections for facet {:?} at layer {}",
                e.facet.map(FacetId::name),
                e.layer
            )));
        }
        self.entries.push(e);
        Ok(())
    }

    pub fn entries(&self) -> &[InjectionEntry] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn layers(&self) -> BTreeSet<usize> {
        self.entries.iter().map(|e| e.layer).collect()
    }

    /// Copy of the plan with every entry's strength replaced.
    pub fn with_alpha(&self, alpha: f64) -> Self {
        let mut p = self.clone();
        for e in &mut p.entries {
            e.alpha = alpha;
        }
        p
    }
}

/// `h + alpha * v`. A zero strength returns `h` untouched.
pub fn inject(h: &[f64], e: &InjectionEntry) -> Result<Vec<f64>> {
    let mut out = h.to_vec();
    inject_in_place(&mut out, e)?;
    Ok(out)
}

fn inject_in_place(h: &mut [f64], e: &InjectionEntry) -> Result<()> {
    if h.len() != e.vector.len() {
        return Err(Error::DimensionMismatch {
            what: "injection vector",
            expected: h.len(),
            actual: e.vector.len(),
        });
    }
    if e.alpha == 0.0 {
        return Ok(());
    }
    for (x, v) in h.iter_mut().zip(&e.vector) {
        *x += e.alpha * v;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_classes: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_layers: 8,
            n_classes: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
struct Block {
    a: Mat,
    c: Vec<f64>,
}

impl Block {
    fn update(&self, h: &[f64]) -> Vec<f64> {
        let pre = self.a.matvec(h);
        pre.iter().zip(&self.c).map(|(p, c)| (p + c).tanh()).collect()
    }
}

/// `L` residual blocks `h <- h + P tanh(A h + c)` and a linear readout.
/// `P` is the identity except on aligned toys, where it removes the aligned
/// direction.
#[derive(Debug, Clone)]
pub struct ToyModel {
    cfg: ToyConfig,
    blocks: Vec<Block>,
    readout: Mat,
    protected: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyRun {
    pub hidden: Vec<f64>,
    pub logits: Vec<f64>,
    /// State after each block, injections included.
    pub trace: Vec<Vec<f64>>,
}

impl ToyModel {
    pub fn new(cfg: ToyConfig) -> Result<Self> {
        if cfg.d_model == 0 || cfg.n_layers == 0 || cfg.n_classes == 0 {
            return Err(Error::Config(format!("toy model needs nonzero sizes, got {cfg:?}")));
        }
        let mut rng = seeded_rng(cfg.seed, 0x701);
        let d = cfg.d_model;
        let w_scale = 1.0 / (d as f64).sqrt();
        let mut gauss = |s: f64| -> f64 {
            let x: f64 = StandardNormal.sample(&mut rng);
            s * x
        };
        let blocks = (0..cfg.n_layers)
            .map(|_| {
                let mut a = Mat::zeros(d, d);
                a.data.iter_mut().for_each(|x| *x = gauss(w_scale));
                let c = (0..d).map(|_| gauss(0.1)).collect();
                Block { a, c }
            })
            .collect();
        let mut readout = Mat::zeros(cfg.n_classes, d);
        readout.data.iter_mut().for_each(|x| *x = gauss(w_scale));
        Ok(Self {
            cfg,
            blocks,
            readout,
            protected: None,
        })
    }

    /// A toy whose readout row `class` is the unit `direction` and whose block
    /// updates are projected off that direction, so the aligned logit moves
    /// only with the input and with injections along it.
    pub fn aligned(cfg: ToyConfig, direction: &[f64], class: usize) -> Result<Self> {
        let mut m = Self::new(cfg)?;
        if direction.len() != cfg.d_model {
            return Err(Error::DimensionMismatch {
                what: "aligned direction",
                expected: cfg.d_model,
                actual: direction.len(),
            });
        }
        if class >= cfg.n_classes {
            return Err(Error::Config(format!(
                "class {class} out of range for {} classes",
                cfg.n_classes
            )));
        }
        let n = norm(direction);
        if n == 0.0 || !n.is_finite() {
            return Err(Error::ZeroNorm("aligned direction".into()));
        }
        let u: Vec<f64> = direction.iter().map(|x| x / n).collect();
        m.readout.row_mut(class).copy_from_slice(&u);
        m.protected = Some(u);
        Ok(m)
    }

    pub fn config(&self) -> ToyConfig {
        self.cfg
    }

    pub fn d_model(&self) -> usize {
        self.cfg.d_model
    }

    pub fn n_layers(&self) -> usize {
        self.cfg.n_layers
    }

    /// Mid-depth injection layer.
    pub fn default_layer(&self) -> usize {
        self.cfg.n_layers / 2
    }

    pub fn readout(&self, h: &[f64]) -> Vec<f64> {
        self.readout.matvec(h)
    }

    pub fn forward(&self, h0: &[f64]) -> Result<ToyRun> {
        run_toy(self, h0, &InjectionPlan::empty())
    }
}

pub fn run_toy(model: &ToyModel, h0: &[f64], plan: &InjectionPlan) -> Result<ToyRun> {
    let d = model.d_model();
    if h0.len() != d {
        return Err(Error::DimensionMismatch {
            what: "toy input",
            expected: d,
            actual: h0.len(),
        });
    }
    for e in plan.entries() {
        if e.layer >= model.n_layers() {
            return Err(Error::LayerOutOfRange {
                layer: e.layer,
                n_layers: model.n_layers(),
            });
        }
        if e.vector.len() != d {
            return Err(Error::DimensionMismatch {
                what: "injection vector",
                expected: d,
                actual: e.vector.len(),
            });
        }
    }
    let mut h = h0.to_vec();
    let mut trace = Vec::with_capacity(model.n_layers());
    for (layer, b) in model.blocks.iter().enumerate() {
        let mut upd = b.update(&h);
        if let Some(u) = &model.protected {
            let p = dot(u, &upd);
            for (x, ui) in upd.iter_mut().zip(u) {
                *x -= p * ui;
            }
        }
        for (x, du) in h.iter_mut().zip(&upd) {
            *x += du;
        }
        for e in plan.entries().iter().filter(|e| e.layer == layer) {
            inject_in_place(&mut h, e)?;
        }
        trace.push(h.clone());
    }
    let logits = model.readout(&h);
    Ok(ToyRun {
        hidden: h,
        logits,
        trace,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepTable {
    pub columns: Vec<String>,
    pub rows: Vec<SweepRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub values: Vec<f64>,
}

impl SweepTable {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r.values[i]).collect())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("alpha");
        for c in &self.columns {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&fmt_sig6(r.alpha));
            for v in &r.values {
                let _ = write!(out, ",{}", fmt_sig6(*v));
            }
            out.push('\n');
        }
        out
    }
}

/// Metrics returned by a sweep evaluator, in column order.
pub type Metrics = Vec<(String, f64)>;

/// Evaluate `eval_fn` once per strength, with every template entry rescaled.
pub fn alpha_sweep<F>(model: &ToyModel, mut eval_fn: F, alphas: &[f64], template: &InjectionPlan) -> Result<SweepTable>
where
    F: FnMut(&ToyModel, &InjectionPlan) -> Result<Metrics>,
{
    if alphas.is_empty() {
        return Err(Error::Empty("alpha list".into()));
    }
    if let Some(a) = alphas.iter().find(|a| !a.is_finite()) {
        return Err(Error::NonFinite(format!("alpha {a}")));
    }
    let mut columns: Option<Vec<String>> = None;
    let mut rows = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let wrap = |source: Error| Error::Sweep {
            alpha,
            source: Box::new(source),
        };
        let metrics = eval_fn(model, &template.with_alpha(alpha)).map_err(wrap)?;
        let names: Vec<String> = metrics.iter().map(|(n, _)| n.clone()).collect();
        match &columns {
            None => columns = Some(names),
            Some(c) if *c != names => {
                return Err(wrap(Error::Schema(format!(
                    "metric columns changed: {c:?} vs {names:?}"
                ))));
            }
            Some(_) => {}
        }
        rows.push(SweepRow {
            alpha,
            values: metrics.into_iter().map(|(_, v)| v).collect(),
        });
    }
    Ok(SweepTable {
        columns: columns.unwrap_or_default(),
        rows,
    })
}

/// Standard sweep metrics over a fixed input batch: mean aligned logit and
/// probability, mean logit of the other classes, and mean final-state shift.
pub fn toy_metrics(model: &ToyModel, inputs: &[Vec<f64>], class: usize, plan: &InjectionPlan) -> Result<Metrics> {
    if inputs.is_empty() {
        return Err(Error::Empty("sweep inputs".into()));
    }
    let k = model.config().n_classes;
    if class >= k {
        return Err(Error::Config(format!("class {class} out of range for {k} classes")));
    }
    let (mut on, mut prob, mut off, mut shift) = (0.0, 0.0, 0.0, 0.0);
    for h0 in inputs {
        let base = model.forward(h0)?;
        let run = run_toy(model, h0, plan)?;
        on += run.logits[class];
        prob += softmax(&run.logits)[class];
        if k > 1 {
            off += (run.logits.iter().sum::<f64>() - run.logits[class]) / (k - 1) as f64;
        }
        shift += norm(&crate::linalg::sub(&run.hidden, &base.hidden));
    }
    let n = inputs.len() as f64;
    Ok(vec![
        ("on_target_logit".into(), on / n),
        ("on_target_prob".into(), prob / n),
        ("off_target_logit".into(), off / n),
        ("hidden_shift".into(), shift / n),
    ])
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(v: Vec<f64>, alpha: f64) -> InjectionEntry {
        InjectionEntry {
            layer: 0,
            vector: v,
            alpha,
            facet: None,
        }
    }

    fn toy() -> ToyModel {
        ToyModel::new(ToyConfig {
            d_model: 6,
            n_layers: 4,
            n_classes: 3,
            seed: 11,
        })
        .unwrap()
    }

    #[test]
    fn inject_arithmetic() {
        let h = inject(&[1.0, 0.0], &entry(vec![0.0, 2.0], 0.5)).unwrap();
        assert_eq!(h, vec![1.0, 1.0]);
    }

    #[test]
    fn zero_alpha_is_bitwise_identity() {
        let h = vec![-0.0, 1.5, f64::MIN_POSITIVE];
        let out = inject(&h, &entry(vec![1.0, -2.0, 3.0], 0.0)).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&out), bits(&h));
    }

    #[test]
    fn inject_rejects_dimension_mismatch() {
        assert!(matches!(
            inject(&[1.0], &entry(vec![0.0, 2.0], 1.0)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn plan_rejects_duplicate_layer_facet() {
        let f = FacetId::from_ordinal(3);
        let e = InjectionEntry {
            layer: 1,
            vector: vec![1.0],
            alpha: 1.0,
            facet: f,
        };
        assert!(InjectionPlan::new(vec![e.clone(), e]).is_err());
    }

    #[test]
    fn empty_plan_matches_zero_alpha_plan() {
        let m = toy();
        let h0 = vec![0.3, -0.1, 0.2, 0.0, 1.0, -0.5];
        let a = run_toy(&m, &h0, &InjectionPlan::empty()).unwrap();
        let b = run_toy(
            &m,
            &h0,
            &InjectionPlan::single_layer(2, vec![1.0; 6], 0.0, None).unwrap(),
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn injection_is_causal() {
        let m = toy();
        let h0 = vec![0.3, -0.1, 0.2, 0.0, 1.0, -0.5];
        let base = m.forward(&h0).unwrap();
        let plan = InjectionPlan::single_layer(3, vec![0.5; 6], 1.0, None).unwrap();
        let run = run_toy(&m, &h0, &plan).unwrap();
        assert_eq!(base.trace[..3], run.trace[..3]);
        assert_ne!(base.trace[3], run.trace[3]);
    }

    #[test]
    fn out_of_range_layer() {
        let m = toy();
        let plan = InjectionPlan::single_layer(4, vec![0.0; 6], 1.0, None).unwrap();
        assert!(matches!(
            run_toy(&m, &[0.0; 6], &plan),
            Err(Error::LayerOutOfRange { layer: 4, n_layers: 4 })
        ));
    }

    #[test]
    fn toy_is_reproducible() {
        let h0 = vec![0.1; 6];
        assert_eq!(toy().forward(&h0).unwrap(), toy().forward(&h0).unwrap());
        assert_eq!(toy().default_layer(), 2);
    }

    #[test]
    fn aligned_readout_tracks_injection_exactly() {
        let u = vec![0.6, 0.0, 0.8, 0.0, 0.0, 0.0];
        let cfg = ToyConfig {
            d_model: 6,
            n_layers: 4,
            n_classes: 3,
            seed: 5,
        };
        let m = ToyModel::aligned(cfg, &u, 1).unwrap();
        let h0 = vec![0.2, -0.4, 0.1, 0.3, 0.0, 0.5];
        let base = m.forward(&h0).unwrap().logits[1];
        assert!((base - dot(&u, &h0)).abs() < 1e-12);
        for alpha in [0.5, 1.0, 2.0] {
            let plan = InjectionPlan::single_layer(1, u.clone(), alpha, None).unwrap();
            let l = run_toy(&m, &h0, &plan).unwrap().logits[1];
            assert!((l - base - alpha).abs() < 1e-12);
        }
    }

    #[test]
    fn sweep_single_zero_row_is_base() {
        let m = toy();
        let inputs = vec![vec![0.1; 6]];
        let tpl = InjectionPlan::single_layer(2, vec![1.0; 6], 1.0, None).unwrap();
        let t = alpha_sweep(&m, |m, p| toy_metrics(m, &inputs, 0, p), &[0.0], &tpl).unwrap();
        let base = m.forward(&inputs[0]).unwrap();
        assert_eq!(t.rows.len(), 1);
        assert_eq!(t.column("on_target_logit").unwrap(), vec![base.logits[0]]);
        assert_eq!(t.column("hidden_shift").unwrap(), vec![0.0]);
    }

    #[test]
    fn sweep_error_names_alpha() {
        let m = toy();
        let tpl = InjectionPlan::single_layer(0, vec![1.0; 6], 1.0, None).unwrap();
        let err = alpha_sweep(
            &m,
            |_, p| {
                if p.entries()[0].alpha > 1.0 {
                    Err(Error::Invariant("boom".into()))
                } else {
                    Ok(vec![("x".into(), 0.0)])
                }
            },
            &[0.0, 1.0, 1.5],
            &tpl,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Sweep { alpha, .. } if alpha == 1.5));
    }

    #[test]
    fn csv_schema() {
        let t = SweepTable {
            columns: vec!["a".into(), "b".into()],
            rows: vec![SweepRow {
                alpha: 0.5,
                values: vec![1.0, 2.0 / 3.0],
            }],
        };
        assert_eq!(t.to_csv(), "alpha,a,b\n0.5,1,0.666667\n");
    }
}
