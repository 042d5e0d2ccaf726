//! Derivative-free search over Gabor parameters.
//!
//! The objective simulates a fixed batch of scenarios with the candidate
//! masks, decodes them, and scores speed error over accepted windows.
//! Textures, paths, heights and noise streams depend only on the scenario
//! seed, so every candidate sees identical conditions. The search is a
//! bounded Nelder-Mead simplex run from one or more starts, one of which
//! is always the hand-picked baseline.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoder::{decode_windows, window_targets, DecoderConfig};
use crate::error::{Error, Result};
use crate::mask::{rasterize, GaborParams};
use crate::rng;
use crate::sensor::{apply_electronics, raw_signals, DetectorKernels, HeightProfile, SensorConfig};
use crate::texture::{generate, TextureField, TextureSpec};
use crate::trajectory::{PathSpec, PlanarPath};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Rmse,
    Mae,
}

impl Metric {
    pub fn of(self, errors: &[f64]) -> f64 {
        if errors.is_empty() {
            return 0.0;
        }
        let n = errors.len() as f64;
        match self {
            Metric::Rmse => (errors.iter().map(|e| e * e).sum::<f64>() / n).sqrt(),
            Metric::Mae => errors.iter().map(|e| e.abs()).sum::<f64>() / n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveConfig {
    pub texture_specs: Vec<TextureSpec>,
    pub path_specs: Vec<PathSpec>,
    /// Heights are drawn uniformly in `h_nom (1 +- pct / 100)` per decoder window.
    pub height_range_pct: f64,
    pub windows_per_scenario: usize,
    pub stride_ms: u32,
    pub master_seed: u64,
    pub metric: Metric,
    /// Scenario ids to evaluate; empty means `0..scenario_count`.
    pub scenarios: Vec<u64>,
    /// Used when `scenarios` is empty; 0 means one per texture/path pair.
    pub scenario_count: usize,
    /// Extra error, in m/s per unit of rejected fraction above the allowance.
    pub rejection_penalty: f64,
    pub rejection_allowance: f64,
    pub sensor: SensorConfig,
    pub decoder: DecoderConfig,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            texture_specs: Vec::new(),
            path_specs: Vec::new(),
            height_range_pct: 0.0,
            windows_per_scenario: 3,
            stride_ms: 500,
            master_seed: 0,
            metric: Metric::Rmse,
            scenarios: Vec::new(),
            scenario_count: 0,
            rejection_penalty: 1.0,
            rejection_allowance: 0.2,
            sensor: SensorConfig::default(),
            decoder: DecoderConfig::default(),
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.texture_specs.is_empty() {
            return Err(Error::invalid("texture_specs", "must not be empty"));
        }
        if self.path_specs.is_empty() {
            return Err(Error::invalid("path_specs", "must not be empty"));
        }
        if self.windows_per_scenario == 0 {
            return Err(Error::invalid("windows_per_scenario", "must be >= 1"));
        }
        if self.stride_ms == 0 {
            return Err(Error::invalid("stride_ms", "must be >= 1"));
        }
        if !(0.0..100.0).contains(&self.height_range_pct) {
            return Err(Error::invalid("height_range_pct", format!("{} outside [0, 100)", self.height_range_pct)));
        }
        if !(self.rejection_penalty >= 0.0) || !(0.0..=1.0).contains(&self.rejection_allowance) {
            return Err(Error::invalid("rejection penalty", "weight must be >= 0, allowance in [0, 1]"));
        }
        for t in &self.texture_specs {
            t.validate()?;
        }
        self.sensor.validate()?;
        self.decoder.validate()
    }

    /// Scenario ids this config evaluates.
    pub fn scenario_ids(&self) -> Vec<u64> {
        if !self.scenarios.is_empty() {
            return self.scenarios.clone();
        }
        let n = match self.scenario_count {
            0 => self.texture_specs.len() * self.path_specs.len(),
            n => n,
        };
        (0..n as u64).collect()
    }

    fn stride_samples(&self) -> usize {
        (self.stride_ms as f64 * 1e-3 * self.decoder.sample_rate_hz).round() as usize
    }

    /// Samples per scenario so that exactly `windows_per_scenario` windows fit.
    pub fn samples_per_scenario(&self) -> usize {
        self.decoder.window_len + (self.windows_per_scenario - 1) * self.stride_samples()
    }

    pub fn with_scenarios(&self, ids: &[u64]) -> Self {
        Self {
            scenarios: ids.to_vec(),
            ..self.clone()
        }
    }
}

/// One simulated condition, independent of the mask parameters.
#[derive(Debug, Clone)]
pub struct PreparedScenario {
    pub id: u64,
    pub texture: TextureField,
    pub path: PlanarPath,
    pub heights: Vec<f64>,
    pub noise_seed: u64,
    pub targets: Vec<f64>,
}

/// Texture/path/height cache for repeated objective evaluations.
#[derive(Debug, Clone)]
pub struct PreparedObjective {
    pub cfg: ObjectiveConfig,
    pub scenarios: Vec<PreparedScenario>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveValue {
    pub value: f64,
    pub error: f64,
    pub rejected_fraction: f64,
    pub accepted: usize,
    pub windows: usize,
}

fn prepare_scenario(cfg: &ObjectiveConfig, id: u64) -> Result<PreparedScenario> {
    let nt = cfg.texture_specs.len() as u64;
    let np = cfg.path_specs.len() as u64;
    let seed = rng::derive_seed(cfg.master_seed, rng::tag::SCENARIO, id);
    let tex_spec = cfg.texture_specs[(id % nt) as usize].with_seed(rng::derive_seed(seed, rng::tag::TEXTURE, 0));
    let texture = generate(&tex_spec)?;

    let n = cfg.samples_per_scenario();
    let mut spec = cfg.path_specs[((id / nt) % np) as usize].with_seed(rng::derive_seed(seed, rng::tag::PATH, 0));
    spec.rate_hz = crate::sensor::SIM_RATE_HZ;
    spec.duration_s = (n - 1) as f64 / spec.rate_hz;
    let mut path = spec.generate()?;
    // Start somewhere different on the texture for each scenario.
    let mut r = rng::stream(seed, rng::tag::PATH, 1);
    let extent = texture.extent_m();
    let (ox, oy) = (r.random::<f64>() * extent[0], r.random::<f64>() * extent[1]);
    path.x.iter_mut().for_each(|x| *x += ox);
    path.y.iter_mut().for_each(|y| *y += oy);

    let profile = if cfg.height_range_pct == 0.0 {
        HeightProfile::Nominal
    } else {
        HeightProfile::PerWindow {
            range_pct: cfg.height_range_pct,
            window_s: cfg.decoder.window_len as f64 / cfg.decoder.sample_rate_hz,
        }
    };
    let heights = profile.series(&cfg.sensor, path.len(), 1.0 / crate::sensor::SIM_RATE_HZ, seed)?;
    let stride = cfg.stride_samples();
    let ends: Vec<f64> = (0..cfg.windows_per_scenario)
        .map(|w| path.t[w * stride + cfg.decoder.window_len - 1])
        .collect();
    let targets = window_targets(&path, &ends, 0.1);
    Ok(PreparedScenario {
        id,
        texture,
        path,
        heights,
        noise_seed: seed,
        targets,
    })
}

impl PreparedObjective {
    pub fn new(cfg: &ObjectiveConfig) -> Result<Self> {
        cfg.validate()?;
        let ids = cfg.scenario_ids();
        if ids.is_empty() {
            return Err(Error::Empty("scenario set"));
        }
        let scenarios = ids
            .par_iter()
            .map(|&id| prepare_scenario(cfg, id))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            scenarios,
        })
    }

    /// Simulates and decodes every scenario with masks built from `params`.
    pub fn evaluate(&self, params: &GaborParams) -> Result<ObjectiveValue> {
        params.validate()?;
        let cfg = &self.cfg;
        let masks = rasterize(params, cfg.sensor.view_px)?;
        let kernels = DetectorKernels::new(&masks, &cfg.sensor)?;
        let xi_ground = cfg.sensor.ground_frequency(params.xi0, cfg.sensor.h_nom_m);
        let per: Vec<(Vec<f64>, Vec<f64>, usize)> = self
            .scenarios
            .par_iter()
            .map(|s| -> Result<_> {
                let raw = raw_signals(&s.texture, &kernels, &cfg.sensor, &s.path, &s.heights)?;
                let trace = apply_electronics(&s.path.t, &raw, &cfg.sensor, s.noise_seed).differential();
                let est = decode_windows(&trace, cfg.stride_ms, xi_ground, &cfg.decoder)?;
                let mut errs = Vec::new();
                for (e, v) in est.iter().zip(&s.targets) {
                    if e.accepted {
                        errs.push(e.v_hat - v);
                    }
                }
                Ok((errs, s.targets.clone(), est.len()))
            })
            .collect::<Result<_>>()?;
        let mut errors = Vec::new();
        let mut truths = Vec::new();
        let mut windows = 0;
        for (e, t, w) in per {
            errors.extend(e);
            truths.extend(t);
            windows += w;
        }
        let accepted = errors.len();
        let rejected_fraction = 1.0 - accepted as f64 / windows.max(1) as f64;
        // With nothing accepted, score as if the decoder had reported standstill.
        let error = if accepted == 0 { cfg.metric.of(&truths) } else { cfg.metric.of(&errors) };
        let value = error + cfg.rejection_penalty * (rejected_fraction - cfg.rejection_allowance).max(0.0);
        Ok(ObjectiveValue {
            value,
            error,
            rejected_fraction,
            accepted,
            windows,
        })
    }
}

/// One-shot objective evaluation.
pub fn objective(params: &GaborParams, cfg: &ObjectiveConfig) -> Result<f64> {
    params.validate()?;
    Ok(PreparedObjective::new(cfg)?.evaluate(params)?.value)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub xi0: [f64; 2],
    pub sigma: [f64; 2],
    pub alpha: [f64; 2],
}

impl Default for Bounds {
    fn default() -> Self {
        Self {
            xi0: [1.0, 20.0],
            sigma: [0.2, 2.0],
            alpha: [0.05, 1.0],
        }
    }
}

impl Bounds {
    pub fn validate(&self) -> Result<()> {
        for (name, [lo, hi]) in [("xi0", self.xi0), ("sigma", self.sigma), ("alpha", self.alpha)] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi && lo > 0.0) {
                return Err(Error::invalid("bounds", format!("{name} range [{lo}, {hi}] is not a positive interval")));
            }
        }
        if self.alpha[1] > 1.0 {
            return Err(Error::invalid("bounds", "alpha upper bound exceeds 1"));
        }
        Ok(())
    }

    pub fn contains(&self, p: &GaborParams) -> bool {
        let inside = |v: f64, [lo, hi]: [f64; 2]| (lo..=hi).contains(&v);
        inside(p.xi0, self.xi0) && inside(p.sigma, self.sigma) && inside(p.alpha, self.alpha)
    }

    fn ranges(&self) -> [[f64; 2]; 3] {
        [self.xi0, self.sigma, self.alpha]
    }

    fn to_unit(&self, p: &GaborParams) -> [f64; 3] {
        let v = [p.xi0, p.sigma, p.alpha];
        let mut z = [0.0; 3];
        for (i, [lo, hi]) in self.ranges().into_iter().enumerate() {
            z[i] = if hi > lo { ((v[i] - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.0 };
        }
        z
    }

    fn from_unit(&self, z: &[f64; 3]) -> GaborParams {
        let r = self.ranges();
        let at = |i: usize| r[i][0] + z[i].clamp(0.0, 1.0) * (r[i][1] - r[i][0]);
        GaborParams {
            xi0: at(0),
            sigma: at(1),
            alpha: at(2),
        }
    }

    /// Uniform random point inside the bounds.
    pub fn sample(&self, rng: &mut impl Rng) -> GaborParams {
        self.from_unit(&[rng.random(), rng.random(), rng.random()])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NelderMeadConfig {
    pub reflection: f64,
    pub expansion: f64,
    pub contraction: f64,
    pub shrink: f64,
    /// Stop once the simplex objective spread falls below this (m/s).
    pub f_tol: f64,
    pub max_evals: usize,
    /// Initial simplex edge in bound-normalized units.
    pub initial_step: f64,
}

impl Default for NelderMeadConfig {
    fn default() -> Self {
        Self {
            reflection: 1.0,
            expansion: 2.0,
            contraction: 0.5,
            shrink: 0.5,
            f_tol: 1e-4,
            max_evals: 200,
            initial_step: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub start: usize,
    pub eval: usize,
    pub params: GaborParams,
    pub objective: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StartOutcome {
    pub start_params: GaborParams,
    pub best_params: GaborParams,
    pub best_objective: f64,
    pub evals: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimResult {
    pub best_params: GaborParams,
    pub best_objective: f64,
    pub baseline_params: GaborParams,
    pub baseline_objective: f64,
    pub starts: Vec<StartOutcome>,
    pub history: Vec<HistoryEntry>,
    /// Scenario ids the objective was evaluated on.
    pub scenarios: Vec<u64>,
}

/// Bounded Nelder-Mead from a single start. `f` is called with points
/// already projected into the bounds.
pub fn nelder_mead(
    mut f: impl FnMut(&GaborParams) -> Result<f64>,
    start: &GaborParams,
    bounds: &Bounds,
    nm: &NelderMeadConfig,
    mut record: impl FnMut(&GaborParams, f64),
) -> Result<StartOutcome> {
    let mut evals = 0;
    let mut eval = |z: &[f64; 3], evals: &mut usize| -> Result<f64> {
        let p = bounds.from_unit(z);
        let v = f(&p)?;
        *evals += 1;
        record(&p, v);
        Ok(v)
    };
    let z0 = bounds.to_unit(start);
    let mut simplex: Vec<([f64; 3], f64)> = Vec::with_capacity(4);
    simplex.push((z0, eval(&z0, &mut evals)?));
    for i in 0..3 {
        let mut z = z0;
        z[i] = if z[i] + nm.initial_step <= 1.0 { z[i] + nm.initial_step } else { z[i] - nm.initial_step };
        let v = eval(&z, &mut evals)?;
        simplex.push((z, v));
    }
    let project = |z: [f64; 3]| z.map(|v| v.clamp(0.0, 1.0));
    let mut converged = false;
    loop {
        // Stable: ties keep earlier vertices (and so the start) first.
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let spread = simplex[3].1 - simplex[0].1;
        if spread < nm.f_tol {
            converged = true;
            break;
        }
        if evals >= nm.max_evals {
            break;
        }
        let mut c = [0.0; 3];
        for (z, _) in &simplex[..3] {
            for k in 0..3 {
                c[k] += z[k] / 3.0;
            }
        }
        let worst = simplex[3];
        let along = |t: f64| project(std::array::from_fn(|k| c[k] + t * (worst.0[k] - c[k])));
        let zr = along(-nm.reflection);
        let fr = eval(&zr, &mut evals)?;
        if fr < simplex[0].1 {
            let ze = along(-nm.reflection * nm.expansion);
            let fe = eval(&ze, &mut evals)?;
            simplex[3] = if fe < fr { (ze, fe) } else { (zr, fr) };
            continue;
        }
        if fr < simplex[2].1 {
            simplex[3] = (zr, fr);
            continue;
        }
        let (zc, fc, accept) = if fr < worst.1 {
            let zc = along(-nm.reflection * nm.contraction);
            let fc = eval(&zc, &mut evals)?;
            (zc, fc, fc <= fr)
        } else {
            let zc = along(nm.contraction);
            let fc = eval(&zc, &mut evals)?;
            (zc, fc, fc < worst.1)
        };
        if accept {
            simplex[3] = (zc, fc);
            continue;
        }
        let best = simplex[0].0;
        for v in simplex.iter_mut().skip(1) {
            if evals >= nm.max_evals {
                break;
            }
            let z = project(std::array::from_fn(|k| best[k] + nm.shrink * (v.0[k] - best[k])));
            *v = (z, eval(&z, &mut evals)?);
        }
    }
    let (zb, fb) = simplex
        .iter()
        .copied()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("simplex has four vertices");
    Ok(StartOutcome {
        start_params: *start,
        best_params: bounds.from_unit(&zb),
        best_objective: fb,
        evals,
        converged,
    })
}

/// Multi-start search. The baseline parameters are prepended to `starts`
/// when missing, so the result is never worse than the baseline.
pub fn optimize_with(
    mut f: impl FnMut(&GaborParams) -> Result<f64>,
    bounds: &Bounds,
    starts: &[GaborParams],
    nm: &NelderMeadConfig,
) -> Result<OptimResult> {
    bounds.validate()?;
    let baseline = GaborParams::FIXED;
    if !bounds.contains(&baseline) {
        return Err(Error::invalid("bounds", "must contain the baseline parameters"));
    }
    let mut all = Vec::with_capacity(starts.len() + 1);
    if !starts.contains(&baseline) {
        all.push(baseline);
    }
    all.extend_from_slice(starts);
    for s in &all {
        s.validate()?;
        if !bounds.contains(s) {
            return Err(Error::invalid("start", format!("{s:?} lies outside the bounds")));
        }
    }
    let mut history = Vec::new();
    let mut outcomes = Vec::with_capacity(all.len());
    let mut baseline_objective = None;
    for (i, s) in all.iter().enumerate() {
        let out = nelder_mead(&mut f, s, bounds, nm, |p, v| {
            if *p == baseline && baseline_objective.is_none() {
                baseline_objective = Some(v);
            }
            history.push(HistoryEntry {
                start: i,
                eval: history.len(),
                params: *p,
                objective: v,
            });
        })?;
        outcomes.push(out);
    }
    // On ties a caller-supplied start wins over the prepended baseline.
    let prepended = usize::from(!starts.contains(&baseline));
    let best = outcomes
        .iter()
        .enumerate()
        .min_by(|(i, a), (j, b)| {
            a.best_objective
                .total_cmp(&b.best_objective)
                .then_with(|| (*i < prepended).cmp(&(*j < prepended)))
        })
        .map(|(_, o)| o)
        .expect("at least one start");
    Ok(OptimResult {
        best_params: best.best_params,
        best_objective: best.best_objective,
        baseline_params: baseline,
        baseline_objective: baseline_objective.expect("baseline start is evaluated first"),
        starts: outcomes.clone(),
        history,
        scenarios: Vec::new(),
    })
}

/// Searches mask parameters against the simulated scenario batch.
pub fn optimize(cfg: &ObjectiveConfig, bounds: &Bounds, starts: &[GaborParams], nm: &NelderMeadConfig) -> Result<OptimResult> {
    let prepared = PreparedObjective::new(cfg)?;
    let mut res = optimize_with(|p| Ok(prepared.evaluate(p)?.value), bounds, starts, nm)?;
    res.scenarios = cfg.scenario_ids();
    Ok(res)
}

/// `n` random starts drawn inside `bounds`.
pub fn random_starts(bounds: &Bounds, n: usize, seed: u64) -> Vec<GaborParams> {
    let mut r = rng::stream(seed, rng::tag::SCENARIO, u64::MAX);
    (0..n).map(|_| bounds.sample(&mut r)).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<u64>,
    pub validation: Vec<u64>,
    pub test: Vec<u64>,
}

/// Shuffles scenario ids `0..n` and cuts them 70/10/20.
pub fn split_scenarios(n: usize, seed: u64) -> Splits {
    let mut ids: Vec<u64> = (0..n as u64).collect();
    ids.shuffle(&mut rng::stream(seed, rng::tag::SPLIT, 0));
    let n_train = (0.7 * n as f64).round() as usize;
    let n_val = ((0.1 * n as f64).round() as usize).min(n - n_train);
    let test = ids.split_off(n_train + n_val);
    let validation = ids.split_off(n_train);
    Splits {
        train: ids,
        validation,
        test,
    }
}

pub fn history_to_csv(history: &[HistoryEntry]) -> String {
    let mut s = String::from("eval,start,xi0,sigma,alpha,objective\n");
    for h in history {
        s += &format!(
            "{},{},{},{},{},{}\n",
            h.eval, h.start, h.params.xi0, h.params.sigma, h.params.alpha, h.objective
        );
    }
    s
}
