//! Magnitude pruning: per-layer quantile selection, dead-unit removal,
//! prune-retrain cycles and sensitivity scans.

use std::cmp::Ordering;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::conv::ConvSpec;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{Layer, Network, Param};
use crate::train::{evaluate, fit, StopRule, TrainConfig, TrainReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RetrainPolicy {
    /// Surviving weights keep their trained values.
    FineTune,
    /// Surviving weights are redrawn from the initialiser; masks are kept.
    Reinitialise,
}

/// Which weight tensors take part in pruning, by layer kind name
/// (`dense`, `conv`, `group_conv`, `depthwise_conv`).
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum LayerFilter {
    #[default]
    All,
    Kinds(Vec<String>),
}

impl LayerFilter {
    pub fn accepts(&self, kind: &str) -> bool {
        match self {
            LayerFilter::All => true,
            LayerFilter::Kinds(kinds) => kinds.iter().any(|k| k == kind),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneConfig {
    /// Fraction of each layer's surviving weights removed per iteration.
    pub sensitivity: f64,
    pub iterations: usize,
    pub retrain_policy: RetrainPolicy,
    pub retrain: TrainConfig,
    pub retrain_stop: StopRule,
    pub layer_filter: LayerFilter,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            sensitivity: 0.5,
            iterations: 1,
            retrain_policy: RetrainPolicy::FineTune,
            retrain: TrainConfig::default(),
            retrain_stop: StopRule::EarlyStop,
            layer_filter: LayerFilter::All,
        }
    }
}

fn check_sensitivity(s: f64) -> Result<()> {
    if !(0.0..1.0).contains(&s) {
        return Err(Error::invalid(format!("sensitivity {s} outside [0, 1)")));
    }
    Ok(())
}

/// `floor(s·n)`, treating products within rounding noise of an integer as
/// that integer so that decimal sensitivities like 0.29 behave as written.
pub fn prune_count(sensitivity: f64, n: usize) -> usize {
    let x = sensitivity * n as f64;
    let r = x.round();
    if (x - r).abs() <= 1e-9 * x.max(1.0) {
        r as usize
    } else {
        x.floor() as usize
    }
}

/// Indices of the `k` smallest-magnitude eligible entries, ascending by
/// index. Equal magnitudes are taken lowest index first.
pub fn select_smallest(values: &[f64], eligible: Option<&[bool]>, k: usize) -> Result<Vec<usize>> {
    if let Some(i) = values.iter().position(|v| v.is_nan()) {
        return Err(Error::NonFinite(format!("weight at flat index {i}")));
    }
    let mut idx: Vec<usize> = (0..values.len()).filter(|&i| eligible.is_none_or(|e| e[i])).collect();
    if k > idx.len() {
        return Err(Error::invalid(format!("cannot select {k} of {} entries", idx.len())));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let key = |&a: &usize, &b: &usize| -> Ordering { values[a].abs().total_cmp(&values[b].abs()).then(a.cmp(&b)) };
    idx.select_nth_unstable_by(k - 1, key);
    idx.truncate(k);
    idx.sort_unstable();
    Ok(idx)
}

/// Largest magnitude among the `floor(s·n)` entries selected for removal,
/// or `None` when nothing is selected.
pub fn magnitude_threshold(weights: &[f64], sensitivity: f64) -> Result<Option<f64>> {
    if weights.is_empty() {
        return Err(Error::invalid("magnitude threshold of an empty tensor"));
    }
    check_sensitivity(sensitivity)?;
    let sel = select_smallest(weights, None, prune_count(sensitivity, weights.len()))?;
    Ok(sel.iter().map(|&i| weights[i].abs()).max_by(f64::total_cmp))
}

fn conv_kind(spec: &ConvSpec) -> &'static str {
    if spec.groups == 1 {
        "conv"
    } else if spec.groups == spec.d && spec.groups == spec.n_filters {
        "depthwise_conv"
    } else {
        "group_conv"
    }
}

/// One prunable weight tensor of a network.
pub struct PrunableWeight<'a> {
    /// Depth-first position among prunable tensors.
    pub index: usize,
    pub kind: &'static str,
    pub param: &'a mut Param,
}

fn collect_prunable<'a>(layers: &'a mut [Layer], out: &mut Vec<PrunableWeight<'a>>) {
    for layer in layers {
        let mut push = |kind, param: &'a mut Param| {
            if param.is_prunable() {
                let index = out.len();
                out.push(PrunableWeight { index, kind, param });
            }
        };
        match layer {
            Layer::Dense(d) => push("dense", &mut d.weight),
            Layer::Conv(c) => push(conv_kind(&c.spec), &mut c.weight),
            Layer::SeparableConv(s) => {
                push(conv_kind(&s.depthwise.spec), &mut s.depthwise.weight);
                push(conv_kind(&s.pointwise.spec), &mut s.pointwise.weight);
            }
            Layer::Residual(body) => collect_prunable(body, out),
            _ => {}
        }
    }
}

pub fn prunable_weights(net: &mut Network) -> Vec<PrunableWeight<'_>> {
    let mut out = Vec::new();
    collect_prunable(&mut net.layers, &mut out);
    out
}

/// Masks, in every accepted layer, the `floor(s·n)` smallest-magnitude of
/// its `n` currently unmasked weights. Returns the number newly masked.
/// Nothing is changed when any layer would be emptied.
pub fn apply_prune(net: &mut Network, sensitivity: f64, filter: &LayerFilter) -> Result<usize> {
    check_sensitivity(sensitivity)?;
    let mut weights = prunable_weights(net);
    let mut plan = Vec::new();
    for w in weights.iter().filter(|w| filter.accepts(w.kind)) {
        let mask = w.param.mask.as_ref().expect("prunable weight has a mask");
        let alive = mask.kept();
        let k = prune_count(sensitivity, alive);
        if alive > 0 && k >= alive {
            return Err(Error::invalid(format!(
                "sensitivity {sensitivity} would empty prunable layer {} ({})",
                w.index, w.kind
            )));
        }
        plan.push((
            w.index,
            select_smallest(w.param.value.data(), Some(mask.as_slice()), k)?,
        ));
    }
    let mut total = 0;
    for (index, selected) in plan {
        let p = &mut weights[index].param;
        let mask = p.mask.as_mut().expect("prunable weight has a mask");
        for &i in &selected {
            mask.prune(i);
        }
        total += selected.len();
        p.apply_mask();
    }
    Ok(total)
}

/// Masks each accepted layer until `floor(target·n)` of its `n` weights are
/// masked in total, taking the smallest-magnitude survivors.
pub fn prune_to_sparsity(net: &mut Network, target: f64, filter: &LayerFilter) -> Result<usize> {
    check_sensitivity(target)?;
    let mut total = 0;
    for w in prunable_weights(net).into_iter().filter(|w| filter.accepts(w.kind)) {
        let mask = w.param.mask.as_ref().expect("prunable weight has a mask");
        let k = prune_count(target, mask.len()).saturating_sub(mask.pruned());
        let selected = select_smallest(w.param.value.data(), Some(mask.as_slice()), k)?;
        let mask = w.param.mask.as_mut().expect("prunable weight has a mask");
        for &i in &selected {
            mask.prune(i);
        }
        total += selected.len();
        w.param.apply_mask();
    }
    Ok(total)
}

/// A weight layer whose output units can be traced into the next one.
fn producer(layer: &Layer) -> Option<(usize, &Param)> {
    match layer {
        Layer::Dense(d) => Some((d.out_features, &d.weight)),
        Layer::Conv(c) if c.spec.groups == 1 => Some((c.spec.n_filters, &c.weight)),
        _ => None,
    }
}

/// Flat indices in `consumer`'s weights that read unit `unit` of `units`.
fn consumer_slice(consumer: &Layer, units: usize, unit: usize) -> Option<Vec<usize>> {
    match consumer {
        Layer::Dense(d) if d.in_features % units == 0 => {
            let plane = d.in_features / units;
            Some(
                (0..d.out_features)
                    .flat_map(|o| (0..plane).map(move |p| o * d.in_features + unit * plane + p))
                    .collect(),
            )
        }
        Layer::Conv(c) if c.spec.groups == 1 && c.spec.d == units => {
            let kk = c.spec.k * c.spec.k;
            Some(
                (0..c.spec.n_filters)
                    .flat_map(|n| (0..kk).map(move |t| (n * units + unit) * kk + t))
                    .collect(),
            )
        }
        _ => None,
    }
}

fn passes_units(layer: &Layer) -> bool {
    matches!(
        layer,
        Layer::Relu | Layer::MaxPool { .. } | Layer::Dropout { .. } | Layer::BatchNorm(_) | Layer::Flatten
    )
}

fn sweep_dead(layers: &mut [Layer]) -> usize {
    let mut changed = 0;
    for i in 0..layers.len() {
        if let Layer::Residual(body) = &mut layers[i] {
            changed += sweep_dead(body);
            continue;
        }
        let Some((units, _)) = producer(&layers[i]) else {
            continue;
        };
        let Some(j) = (i + 1..layers.len()).find(|&j| !passes_units(&layers[j])) else {
            continue;
        };
        let Some(slices) = (0..units)
            .map(|u| consumer_slice(&layers[j], units, u))
            .collect::<Option<Vec<_>>>()
        else {
            continue;
        };
        let (head, tail) = layers.split_at_mut(j);
        let prod = match &mut head[i] {
            Layer::Dense(d) => &mut d.weight,
            Layer::Conv(c) => &mut c.weight,
            _ => unreachable!("producer kinds"),
        };
        let cons = match &mut tail[0] {
            Layer::Dense(d) => &mut d.weight,
            Layer::Conv(c) => &mut c.weight,
            _ => unreachable!("consumer kinds"),
        };
        let row = prod.value.len() / units;
        let (Some(pm), Some(cm)) = (prod.mask.as_mut(), cons.mask.as_mut()) else {
            continue;
        };
        for (u, slice) in slices.iter().enumerate() {
            let rows = u * row..(u + 1) * row;
            let dead_in = rows.clone().all(|r| !pm.is_kept(r));
            let dead_out = slice.iter().all(|&c| !cm.is_kept(c));
            if !(dead_in || dead_out) {
                continue;
            }
            for r in rows {
                if pm.is_kept(r) {
                    pm.prune(r);
                    changed += 1;
                }
            }
            for &c in slice {
                if cm.is_kept(c) {
                    cm.prune(c);
                    changed += 1;
                }
            }
        }
        prod.apply_mask();
        cons.apply_mask();
    }
    changed
}

/// Masks every dense unit or conv channel with no surviving incoming or no
/// surviving outgoing weights, repeating until nothing changes. Only
/// chains of dense and ungrouped conv layers (through activations,
/// pooling, batch norm, dropout and flatten) are traced. Returns the number
/// of weights newly masked.
pub fn remove_dead_neurons(net: &mut Network) -> usize {
    let mut total = 0;
    loop {
        let changed = sweep_dead(&mut net.layers);
        if changed == 0 {
            return total;
        }
        total += changed;
    }
}

fn retrain_rng(seed: u64, iteration: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5EED_0000).wrapping_add(iteration as u64))
}

/// Runs `cfg.iterations` rounds of prune, dead-unit removal and retraining.
pub fn prune_retrain(net: &mut Network, train: &Dataset, val: &Dataset, cfg: &PruneConfig) -> Result<Vec<TrainReport>> {
    check_sensitivity(cfg.sensitivity)?;
    cfg.retrain.validate()?;
    let mut reports = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        apply_prune(net, cfg.sensitivity, &cfg.layer_filter)?;
        remove_dead_neurons(net);
        if cfg.retrain_policy == RetrainPolicy::Reinitialise {
            net.initialize(&mut retrain_rng(cfg.retrain.seed, it));
        }
        reports.push(fit(net, train, val, &cfg.retrain, cfg.retrain_stop)?);
    }
    Ok(reports)
}

/// One model of a stepwise pruning run.
#[derive(Debug, Clone)]
pub struct PruneStep {
    pub sparsity: f64,
    pub val_accuracy: f64,
    pub params: usize,
}

#[derive(Debug, Clone)]
pub struct StepwiseOutcome {
    /// The last model before validation accuracy first decreased, and at
    /// least the first pruned step.
    pub network: Network,
    pub steps: Vec<PruneStep>,
    pub chosen: usize,
}

/// Raises the per-layer sparsity by `step` at a time (prune, dead-unit
/// removal, retrain) until validation accuracy drops below the previous
/// step, and returns the model from before the drop. Step 0 is the input
/// network; step 1 is always kept, so the result is pruned.
pub fn prune_until_decline(
    net: &Network,
    train: &Dataset,
    val: &Dataset,
    step: f64,
    cfg: &PruneConfig,
) -> Result<StepwiseOutcome> {
    if !(step > 0.0 && step < 1.0) {
        return Err(Error::invalid(format!("sparsity step {step} outside (0, 1)")));
    }
    let mut current = net.clone();
    let mut steps = vec![PruneStep {
        sparsity: 0.0,
        val_accuracy: evaluate(&current, val)?.accuracy,
        params: current.param_count(),
    }];
    let mut best = current.clone();
    let mut chosen = 0;
    for t in 1.. {
        let target = step * t as f64;
        if target >= 1.0 - 1e-9 {
            break;
        }
        let mut candidate = current.clone();
        prune_to_sparsity(&mut candidate, target, &cfg.layer_filter)?;
        remove_dead_neurons(&mut candidate);
        if cfg.retrain_policy == RetrainPolicy::Reinitialise {
            candidate.initialize(&mut retrain_rng(cfg.retrain.seed, t));
        }
        fit(&mut candidate, train, val, &cfg.retrain, cfg.retrain_stop)?;
        let acc = evaluate(&candidate, val)?.accuracy;
        let previous = steps.last().expect("step 0 present").val_accuracy;
        steps.push(PruneStep {
            sparsity: target,
            val_accuracy: acc,
            params: candidate.param_count(),
        });
        if acc < previous && t > 1 {
            break;
        }
        best = candidate.clone();
        chosen = t;
        current = candidate;
    }
    Ok(StepwiseOutcome {
        network: best,
        steps,
        chosen,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScanScope {
    /// Every accepted layer pruned to the same sparsity at once.
    Global,
    /// Each prunable layer pruned on its own.
    PerLayer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityRow {
    pub scope: String,
    pub sparsity: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityReport {
    pub grid: Vec<f64>,
    pub rows: Vec<SensitivityRow>,
}

impl SensitivityReport {
    pub const CSV_HEADER: &'static str = "scope,sparsity,val_accuracy";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            writeln!(s, "{},{},{}", r.scope, r.sparsity, r.val_accuracy).expect("write to string");
        }
        s
    }
}

/// `0.05, 0.10, …, 0.95`.
pub fn default_grid() -> Vec<f64> {
    (1..20).map(|i| i as f64 / 20.0).collect()
}

/// For each grid value, prunes a clone of `net` to that sparsity,
/// retrains it with `quick` under early stopping and records validation
/// accuracy. A grid point that masks nothing is evaluated without
/// retraining.
pub fn sensitivity_scan(
    net: &Network,
    train: &Dataset,
    val: &Dataset,
    grid: &[f64],
    quick: &TrainConfig,
    scope: ScanScope,
    filter: &LayerFilter,
) -> Result<SensitivityReport> {
    if grid.is_empty() {
        return Err(Error::invalid("sensitivity grid is empty"));
    }
    for &g in grid {
        check_sensitivity(g)?;
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("sensitivity grid must be strictly increasing"));
    }
    let groups: Vec<(String, LayerFilter, Option<usize>)> = match scope {
        ScanScope::Global => vec![("global".to_string(), filter.clone(), None)],
        ScanScope::PerLayer => {
            let mut probe = net.clone();
            prunable_weights(&mut probe)
                .iter()
                .filter(|w| filter.accepts(w.kind))
                .map(|w| (format!("layer{}:{}", w.index, w.kind), LayerFilter::All, Some(w.index)))
                .collect()
        }
    };
    let mut rows = Vec::with_capacity(grid.len() * groups.len());
    for (name, group_filter, only) in &groups {
        for &s in grid {
            let mut candidate = net.clone();
            let masked = match only {
                None => prune_to_sparsity(&mut candidate, s, group_filter)?,
                Some(index) => prune_single(&mut candidate, *index, s)?,
            };
            if masked > 0 {
                fit(&mut candidate, train, val, quick, StopRule::EarlyStop)?;
            }
            rows.push(SensitivityRow {
                scope: name.clone(),
                sparsity: s,
                val_accuracy: evaluate(&candidate, val)?.accuracy,
            });
        }
    }
    Ok(SensitivityReport {
        grid: grid.to_vec(),
        rows,
    })
}

fn prune_single(net: &mut Network, index: usize, target: f64) -> Result<usize> {
    let mut weights = prunable_weights(net);
    let w = &mut weights[index];
    let mask = w.param.mask.as_ref().expect("prunable weight has a mask");
    let k = prune_count(target, mask.len()).saturating_sub(mask.pruned());
    let selected = select_smallest(w.param.value.data(), Some(mask.as_slice()), k)?;
    let mask = w.param.mask.as_mut().expect("prunable weight has a mask");
    for &i in &selected {
        mask.prune(i);
    }
    w.param.apply_mask();
    Ok(selected.len())
}

/// Reference over pruned parameter count.
pub fn compression_rate(reference_params: usize, pruned_params: usize) -> Result<f64> {
    if pruned_params == 0 {
        return Err(Error::invalid("pruned network has no parameters"));
    }
    Ok(reference_params as f64 / pruned_params as f64)
}

/// `"10.0×"`.
pub fn format_rate(rate: f64) -> String {
    format!("{rate:.1}×")
}
