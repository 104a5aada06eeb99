//! Identification and the full three-layer closed loop against the nonlinear
//! plants, plus CSV/JSON/SVG output.

use std::collections::VecDeque;
use std::path::Path;
use std::time::Instant;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boiler::BoilerParams;
use crate::config::{default_boilers, default_gains};
use crate::ensemble::{
    aggregate, estimate_disturbance_bound, make_reference, resample, DisturbanceBound,
    EnsembleModel, ReferenceModel,
};
use crate::error::{Error, Result};
use crate::hl::{
    share_cost, should_trigger, solve_shares, solve_shares_at, HlConfig, ShareSolution, StaticMap,
};
use crate::lowlevel::{closed_loop_step, ClosedLoop, LoopGains};
use crate::mpc::{
    build_velocity_form, rate_scale, reconfigure, solve_mpc, tighten, ConstraintSets, Margins,
    MpcConfig, TightenedSets, VelocityModel,
};
use crate::svg::{render, Panel, Series};
use crate::sysid::{fit, fit_percent, realize, ArxModel, StateSpaceModel};

pub const CONFIG_VERSION: u32 = 1;
const AUDIT_TOL: f64 = 1e-9;
const MARGIN_GRID: usize = 8;
/// Share changes below this are treated as no change.
const SHARE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Timing {
    /// Low-level sample time, s.
    pub tau: f64,
    /// Medium-level sample time, s.
    pub t_slow: f64,
    /// High-level period in medium-level steps.
    pub hl_multiplier: usize,
    /// Plant integration step, s.
    pub dt: f64,
}

impl Default for Timing {
    fn default() -> Self {
        Timing {
            tau: 10.0,
            t_slow: 30.0,
            hl_multiplier: 5,
            dt: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Identification {
    pub n_f: usize,
    pub n_b: usize,
    pub n_k: usize,
    /// Number of distinct excitation levels.
    pub levels: usize,
    /// Hold time per level, s.
    pub hold_s: f64,
    /// Fraction of the feasible band left out at each end.
    pub band_margin: f64,
    /// Leading fraction of the record kept for validation.
    pub validation_fraction: f64,
    /// Minimum validation fit, percent.
    pub min_fit: f64,
    /// Index of the template boiler.
    pub template: usize,
}

impl Default for Identification {
    fn default() -> Self {
        Identification {
            n_f: 3,
            n_b: 2,
            n_k: 1,
            levels: 12,
            hold_s: 600.0,
            band_margin: 0.05,
            validation_fraction: 0.2,
            min_fit: 95.0,
            template: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HlSettings {
    /// Demand-deviation weight; 1e3 · max λ_i when absent.
    pub lambda_bar: Option<f64>,
    pub trigger_threshold: f64,
    /// Input-rate bound Δū, kg/s per medium step.
    pub delta_u: f64,
    /// Largest share assumed by the disturbance bound.
    pub alpha_max: f64,
}

impl Default for HlSettings {
    fn default() -> Self {
        HlSettings {
            lambda_bar: None,
            trigger_threshold: 0.03,
            delta_u: 0.5,
            alpha_max: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub version: u32,
    pub boilers: Vec<BoilerParams<f64>>,
    pub u_set: (f64, f64),
    pub y_set: (f64, f64),
    pub timing: Timing,
    /// Simulated time, s.
    pub duration: f64,
    /// Piecewise-constant steam demand, (time s, kg/s), time-sorted.
    pub demand: Vec<(f64, f64)>,
    pub gains: LoopGains<f64>,
    pub mpc: MpcConfig<f64>,
    pub hl: HlSettings,
    pub identification: Identification,
    /// Initial drum water volume as a fraction of V_T.
    pub initial_water_fraction: f64,
    /// Half-width of uniform noise on each measured gas flow, kg/s.
    pub measurement_noise: f64,
    pub seed: u64,
}

pub fn default_demand() -> Vec<(f64, f64)> {
    vec![
        (0.0, 1.5),
        (600.0, 1.7),
        (1200.0, 1.6),
        (1800.0, 2.6),
        (2450.0, 3.4),
        (3000.0, 2.0),
    ]
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            version: CONFIG_VERSION,
            boilers: default_boilers(),
            u_set: (0.089, 6.0),
            y_set: (0.1227, 4.220),
            timing: Timing::default(),
            duration: 3600.0,
            demand: default_demand(),
            gains: default_gains(),
            mpc: MpcConfig::default(),
            hl: HlSettings::default(),
            identification: Identification::default(),
            initial_water_fraction: 0.5,
            measurement_noise: 0.0,
            seed: 0,
        }
    }
}

fn ratio(num: f64, den: f64, what: &str) -> Result<usize> {
    let r = num / den;
    let n = r.round();
    if n < 1.0 || (r - n).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "{what} must be a positive integer multiple"
        )));
    }
    Ok(n as usize)
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Medium-level steps per low-level step count ν.
    pub fn nu(&self) -> Result<usize> {
        ratio(self.timing.t_slow, self.timing.tau, "t_slow / tau")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {}",
                self.version
            )));
        }
        if self.boilers.is_empty() {
            return bad("at least one boiler is required");
        }
        for (i, b) in self.boilers.iter().enumerate() {
            b.validate().map_err(|e| Error::boiler(i, e))?;
        }
        let t = &self.timing;
        if !(t.tau > 0.0 && t.t_slow > 0.0 && t.dt > 0.0) || t.hl_multiplier == 0 {
            return bad("timing values must be positive");
        }
        self.nu()?;
        ratio(t.tau, t.dt, "tau / dt")?;
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return bad("duration must be positive");
        }
        if self.demand.is_empty() {
            return bad("demand profile is empty");
        }
        if self
            .demand
            .iter()
            .any(|&(t, v)| !t.is_finite() || !v.is_finite() || v < 0.0)
        {
            return bad("demand values must be finite and nonnegative");
        }
        if self.demand.windows(2).any(|w| w[1].0 < w[0].0) {
            return bad("demand profile is not time-sorted");
        }
        if !(self.u_set.0 < self.u_set.1 && self.y_set.0 < self.y_set.1) {
            return bad("empty global set");
        }
        let id = &self.identification;
        if id.template >= self.boilers.len() {
            return bad("template index out of range");
        }
        if id.n_k != 1 || id.n_f == 0 || id.n_b == 0 {
            return bad("identification needs n_f, n_b >= 1 and n_k = 1");
        }
        if id.levels < 2 || id.hold_s < t.tau {
            return Err(Error::Identifiability(
                "excitation needs two levels held for at least tau".into(),
            ));
        }
        if !(0.0..0.5).contains(&id.band_margin) {
            return bad("excitation band margin must lie in [0, 0.5)");
        }
        if !(id.validation_fraction > 0.0 && id.validation_fraction < 1.0) {
            return bad("validation fraction must lie in (0, 1)");
        }
        if !(self.hl.delta_u > 0.0 && self.hl.trigger_threshold > 0.0) {
            return bad("delta_u and trigger threshold must be positive");
        }
        if !(self.hl.alpha_max > 0.0 && self.hl.alpha_max <= 1.0) {
            return bad("alpha_max must lie in (0, 1]");
        }
        if matches!(self.hl.lambda_bar, Some(l) if l <= 0.0) {
            return bad("lambda_bar must be positive");
        }
        if !(self.initial_water_fraction > 0.0 && self.initial_water_fraction < 1.0) {
            return bad("initial water fraction must lie in (0, 1)");
        }
        if self.measurement_noise < 0.0 {
            return bad("measurement noise must be nonnegative");
        }
        self.mpc.validate()
    }

    pub fn demand_at(&self, t: f64) -> f64 {
        let mut v = self.demand[0].1;
        for &(ti, vi) in &self.demand {
            if ti <= t {
                v = vi;
            }
        }
        v
    }

    pub fn loop_at(&self, i: usize, q_s: f64) -> Result<ClosedLoop<f64>> {
        let p = self.boilers[i];
        ClosedLoop::steady(
            p,
            &self.gains,
            self.timing.tau,
            self.timing.dt,
            self.initial_water_fraction * p.v_t,
            q_s,
        )
        .map_err(|e| Error::boiler(i, e))
    }
}

/// Steam band in which the set-point steady state needs a gas flow inside
/// the boiler's gas bounds.
pub fn gas_feasible_band(p: &BoilerParams<f64>) -> Result<(f64, f64)> {
    let k = p.balance_gas(p.p_sp, 1.0, 1.0)?;
    let lo = p.q_s_min.max(p.q_g_min / k);
    let hi = p.q_s_max.min(p.q_g_max / k);
    if lo >= hi {
        return Err(Error::Params(format!(
            "no steam flow satisfies the gas bounds (gas/steam ratio {k})"
        )));
    }
    Ok((lo, hi))
}

/// Steady (q_s, q_g) pairs of the closed loop across the feasible band. At
/// rest the integral action holds p at its set-point and q_f = q_s, so the
/// equilibrium gas flow is the energy-balance solution.
pub fn static_map(p: &BoilerParams<f64>, points: usize) -> Result<Vec<(f64, f64)>> {
    let (lo, hi) = gas_feasible_band(p)?;
    (0..points)
        .map(|j| {
            let q_s = lo + (hi - lo) * j as f64 / (points.max(2) - 1) as f64;
            Ok((q_s, p.balance_gas(p.p_sp, q_s, q_s)?))
        })
        .collect()
}

/// Least-squares line through `pts`: (slope, intercept, R²).
pub fn affine_fit(pts: &[(f64, f64)]) -> (f64, f64, f64) {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let slope = sxy / sxx;
    let icpt = my - slope * mx;
    let ss_res: f64 = pts.iter().map(|p| (p.1 - slope * p.0 - icpt).powi(2)).sum();
    let ss_tot: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    let r2 = if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else {
        1.0
    };
    (slope, icpt, r2)
}

/// Visiting order of the excitation levels: alternate between the lower and
/// upper half so that consecutive steps are large.
pub fn excitation_order(levels: usize) -> Vec<usize> {
    let half = levels.div_ceil(2);
    let low: Vec<usize> = (0..half).step_by(2).chain((1..half).step_by(2)).collect();
    let mut order = Vec::with_capacity(levels);
    for &a in &low {
        order.push(a);
        let b = a + half;
        if b < levels {
            order.push(b);
        }
    }
    order
}

#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub u: Vec<f64>,
    pub y: Vec<f64>,
}

/// Multi-level steam command sequence on the closed loop; y(κ) is the gas
/// flow applied during sample κ.
pub fn excite(cfg: &ScenarioConfig, i: usize) -> Result<Experiment> {
    let id = &cfg.identification;
    let p = &cfg.boilers[i];
    let (lo, hi) = gas_feasible_band(p).map_err(|e| Error::boiler(i, e))?;
    let m = id.band_margin * (hi - lo);
    let (lo, hi) = (lo + m, hi - m);
    let levels: Vec<f64> = (0..id.levels)
        .map(|j| lo + (hi - lo) * j as f64 / (id.levels - 1) as f64)
        .collect();
    let hold = (id.hold_s / cfg.timing.tau).round() as usize;
    if id.levels < 2 || hold == 0 {
        return Err(Error::boiler(
            i,
            Error::Identifiability("empty excitation profile".into()),
        ));
    }
    let order = excitation_order(id.levels);
    let mut cl = cfg.loop_at(i, levels[order[0]])?;
    let mut u = Vec::with_capacity(hold * id.levels);
    let mut y = Vec::with_capacity(hold * id.levels);
    for &j in &order {
        for _ in 0..hold {
            let (next, q_g, _) =
                closed_loop_step(&cl, levels[j]).map_err(|e| Error::boiler(i, e))?;
            u.push(levels[j]);
            y.push(q_g);
            cl = next;
        }
    }
    Ok(Experiment { u, y })
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentifiedBoiler {
    pub arx: ArxModel<f64>,
    pub ss: StateSpaceModel<f64>,
    /// Validation fit, percent.
    pub fit: f64,
}

pub fn identify_boiler(cfg: &ScenarioConfig, i: usize) -> Result<IdentifiedBoiler> {
    let id = &cfg.identification;
    let ex = excite(cfg, i)?;
    let n = ex.u.len();
    let nv = (id.validation_fraction * n as f64).floor() as usize;
    let wrap = |e| Error::boiler(i, e);
    let mut arx = fit(&ex.u[nv..], &ex.y[nv..], id.n_f, id.n_b, id.n_k).map_err(wrap)?;
    arx.tau = cfg.timing.tau;
    let sim = arx.simulate(&ex.u[..nv], &ex.y[..nv]);
    let fitp = fit_percent(&ex.y[..nv], &sim);
    if !(fitp >= id.min_fit) {
        return Err(wrap(Error::ModelQuality(format!(
            "validation fit {fitp:.2}% below {}%",
            id.min_fit
        ))));
    }
    let ss = realize(&arx).map_err(wrap)?;
    Ok(IdentifiedBoiler { arx, ss, fit: fitp })
}

pub fn run_identification(cfg: &ScenarioConfig) -> Result<Vec<IdentifiedBoiler>> {
    cfg.validate()?;
    (0..cfg.boilers.len())
        .map(|i| identify_boiler(cfg, i))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BoilerRecord {
    pub alpha: f64,
    pub delta: bool,
    pub q_s: f64,
    pub q_g: f64,
    pub q_f: f64,
    pub p: f64,
    pub v_w: f64,
}

/// One low-level sample: states at its start, flows applied during it.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: f64,
    pub demand: f64,
    pub r: f64,
    pub r_hat: f64,
    pub u_bar: f64,
    pub y_bar: f64,
    pub u_ss: f64,
    pub boilers: Vec<BoilerRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub t: f64,
    pub constraint: String,
    pub value: f64,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunReport {
    pub n_boilers: usize,
    pub tau: f64,
    pub records: Vec<StepRecord>,
    pub violations: Vec<Violation>,
    /// Largest observed ‖w̄‖∞ at the medium timescale.
    pub max_w_inf: f64,
    /// Estimated bound on ‖w̄‖∞.
    pub w_inf_bound: f64,
    /// Estimated bound on the ensemble output mismatch.
    pub y_inf_bound: f64,
    pub hl_solve_count: usize,
    /// Times and patterns at which the activation set changed.
    pub activations: Vec<(f64, Vec<bool>)>,
    pub fits: Vec<f64>,
    pub margins: Option<Margins<f64>>,
    pub wall_ms: f64,
}

impl RunReport {
    pub fn total_gas_kg(&self) -> f64 {
        self.records.iter().map(|r| r.y_bar * self.tau).sum()
    }

    pub fn total_steam_kg(&self) -> f64 {
        self.records
            .iter()
            .map(|r| r.boilers.iter().map(|b| b.q_s).sum::<f64>() * self.tau)
            .sum()
    }
}

/// Everything the controllers need, derived from identification.
pub struct Design {
    pub ident: Vec<IdentifiedBoiler>,
    pub refs: Vec<ReferenceModel<f64>>,
    pub maps: Vec<StaticMap<f64>>,
    pub bias: Vec<f64>,
    pub bound: DisturbanceBound<f64>,
    pub sets: ConstraintSets<f64>,
    pub hl: HlConfig<f64>,
    /// Output mismatch bound used by the tube, measurement noise included.
    pub y_inf: f64,
    pub nu: usize,
    /// Margins shared by every share configuration.
    pub margins: Option<Margins<f64>>,
}

/// Controller objects for one share configuration.
pub struct Configuration {
    pub ens: EnsembleModel<f64>,
    pub vel: VelocityModel<f64>,
    pub tight: TightenedSets<f64>,
}

pub fn configure(
    d: &Design,
    cfg: &ScenarioConfig,
    sol: &ShareSolution<f64>,
) -> Result<Configuration> {
    let ens = resample(&aggregate(&d.refs, &sol.alpha, &sol.delta)?, d.nu)?;
    let vel = build_velocity_form(&ens)?;
    let tight = tighten(
        &vel,
        &d.sets,
        &d.maps,
        d.y_inf,
        &d.bias,
        &cfg.mpc,
        d.margins.as_ref(),
    )?;
    Ok(Configuration { ens, vel, tight })
}

/// The aggregate input matrix depends on the shares only through ḡ, so the
/// margins are maximised over a grid of ḡ between the extreme gains.
fn design_margins(d: &Design, cfg: &ScenarioConfig) -> Result<Margins<f64>> {
    let nb = d.maps.len();
    let (mut lo, mut hi) = (0, 0);
    for i in 0..nb {
        if d.maps[i].g < d.maps[lo].g {
            lo = i;
        }
        if d.maps[i].g > d.maps[hi].g {
            hi = i;
        }
    }
    let mut out: Option<Margins<f64>> = None;
    for j in 0..=MARGIN_GRID {
        let th = j as f64 / MARGIN_GRID as f64;
        let mut alpha = vec![0.0; nb];
        alpha[lo] += 1.0 - th;
        alpha[hi] += th;
        let delta = alpha.iter().map(|&a| a > 0.0).collect();
        let sol = ShareSolution {
            alpha,
            delta,
            u_ss: 0.0,
            cost: 0.0,
            degenerate: true,
        };
        let m = configure(d, cfg, &sol)?.tight.margins;
        out = Some(match out {
            None => m,
            Some(o) => Margins {
                u: o.u.max(m.u),
                y: o.y.max(m.y),
                du: o.du.max(m.du),
                p_i: o.p_i.iter().zip(&m.p_i).map(|(a, b)| a.max(*b)).collect(),
            },
        });
    }
    Ok(out.expect("grid is nonempty"))
}

pub fn design(cfg: &ScenarioConfig) -> Result<Design> {
    let ident = run_identification(cfg)?;
    let nb = cfg.boilers.len();
    let template = &ident[cfg.identification.template].arx;
    let refs = ident
        .iter()
        .enumerate()
        .map(|(i, b)| make_reference(&b.ss, template).map_err(|e| Error::boiler(i, e)))
        .collect::<Result<Vec<_>>>()?;
    let maps: Vec<StaticMap<f64>> = (0..nb)
        .map(|i| StaticMap {
            g: refs[i].g,
            gamma: ident[i].ss.gamma,
        })
        .collect();
    let mut bias = Vec::with_capacity(nb);
    for (i, p) in cfg.boilers.iter().enumerate() {
        let pts = static_map(p, 15).map_err(|e| Error::boiler(i, e))?;
        bias.push(
            pts.iter()
                .map(|&(q_s, q_g)| (q_g - maps[i].g * q_s - maps[i].gamma).abs())
                .fold(0.0, f64::max),
        );
    }
    let nu = cfg.nu()?;
    let actual: Vec<StateSpaceModel<f64>> = ident.iter().map(|b| b.ss.clone()).collect();
    let bound = estimate_disturbance_bound(&refs, &actual, cfg.hl.delta_u, cfg.hl.alpha_max, nu)?;
    let y_inf = bound.y_inf + nb as f64 * cfg.measurement_noise;
    let sets = ConstraintSets {
        u_set: cfg.u_set,
        y_set: cfg.y_set,
        u_i: cfg.boilers.iter().map(|p| (p.q_s_min, p.q_s_max)).collect(),
        y_i: cfg.boilers.iter().map(|p| (p.q_g_min, p.q_g_max)).collect(),
        delta_u: cfg.hl.delta_u,
    };
    let lambda: Vec<f64> = cfg.boilers.iter().map(|p| p.lambda_cost).collect();
    let lmax = lambda.iter().cloned().fold(0.0, f64::max);
    let mut d = Design {
        ident,
        refs,
        maps,
        bias,
        bound,
        sets,
        hl: HlConfig {
            lambda_bar: cfg.hl.lambda_bar.unwrap_or(1e3 * lmax),
            lambda,
            u_set: cfg.u_set,
            y_set: cfg.y_set,
            u_i: Vec::new(),
            y_i: Vec::new(),
            delta_u: cfg.hl.delta_u,
            trigger_threshold: cfg.hl.trigger_threshold,
            period: cfg.timing.hl_multiplier as f64 * cfg.timing.t_slow,
            t_slow: cfg.timing.t_slow,
        },
        y_inf,
        nu,
        margins: None,
    };
    d.margins = Some(design_margins(&d, cfg)?);
    // the share problem works on the same tightened sets as the MPC
    let any = ShareSolution {
        alpha: (0..nb).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect(),
        delta: (0..nb).map(|i| i == 0).collect(),
        u_ss: 0.0,
        cost: 0.0,
        degenerate: true,
    };
    let nominal = configure(&d, cfg, &any)?.tight;
    d.hl.u_set = nominal.u_set;
    d.hl.y_set = nominal.y_set;
    d.hl.u_i = nominal.u_i.clone();
    d.hl.y_i = nominal.p_i.clone();
    Ok(d)
}

struct Unit {
    cl: ClosedLoop<f64>,
    active: bool,
    x_ref: DVector<f64>,
    x_ref_slow: DVector<f64>,
    /// Applied gas flows and steam commands, newest first.
    y_hist: VecDeque<f64>,
    u_hist: VecDeque<f64>,
}

impl Unit {
    fn start(cfg: &ScenarioConfig, d: &Design, i: usize, q_s: f64, active: bool) -> Result<Unit> {
        let cl = cfg.loop_at(i, q_s)?;
        let x_ref = d.refs[i].steady_state(q_s)?;
        let len = d.ident[i].ss.n_f.max(d.ident[i].ss.n_b) + 1;
        let y0 = cl.gas_command();
        Ok(Unit {
            cl,
            active,
            x_ref_slow: x_ref.clone(),
            x_ref,
            y_hist: std::iter::repeat(y0).take(len).collect(),
            u_hist: std::iter::repeat(q_s).take(len).collect(),
        })
    }

    /// Canonical state of the identified model from the measured records.
    fn measured_state(&self, m: &StateSpaceModel<f64>) -> DVector<f64> {
        let mut y = vec![self.cl.gas_command()];
        y.extend(self.y_hist.iter().copied());
        let u: Vec<f64> = self.u_hist.iter().copied().collect();
        m.state_from_history(&y, &u)
    }
}

/// Full closed-loop run.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<RunReport> {
    let start = Instant::now();
    cfg.validate()?;
    let d = design(cfg)?;
    let mut report = simulate(cfg, &d)?;
    report.wall_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(report)
}

/// Closed-loop run with a given controller design.
pub fn simulate(cfg: &ScenarioConfig, d: &Design) -> Result<RunReport> {
    let nb = cfg.boilers.len();
    let nu = d.nu;
    let tau = cfg.timing.tau;
    let t_slow = cfg.timing.t_slow;
    let n_slow = (cfg.duration / t_slow).ceil() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = cfg.measurement_noise;

    let mut report = RunReport {
        n_boilers: nb,
        tau,
        w_inf_bound: d.bound.w_inf,
        y_inf_bound: d.y_inf,
        fits: d.ident.iter().map(|b| b.fit).collect(),
        ..Default::default()
    };

    let d0 = cfg.demand_at(0.0);
    let mut sol = solve_shares(d0, &d.maps, &d.hl, None).map_err(|e| Error::at(0.0, e))?;
    report.hl_solve_count = 1;
    report.activations.push((0.0, sol.delta.clone()));
    let mut units = (0..nb)
        .map(|i| {
            let q = if sol.delta[i] {
                sol.alpha[i] * sol.u_ss
            } else {
                cfg.boilers[i].q_s_min
            };
            Unit::start(cfg, d, i, q, sol.delta[i])
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e| Error::at(0.0, e))?;
    let mut conf = configure(d, cfg, &sol).map_err(|e| Error::at(0.0, e))?;
    report.margins = Some(conf.tight.margins.clone());
    let mut r = conf.ens.g_bar * sol.u_ss + conf.ens.gamma_bar;
    let mut u_prev = sol.u_ss;
    let mut last_demand = d0;
    let mut last_k = 0;
    let mut scale = 1.0;
    // measured ensemble state, input and slow matrices of the previous step
    let mut prev_w: Option<(DVector<f64>, f64)> = None;

    for k in 0..n_slow {
        let t = k as f64 * t_slow;
        let demand = cfg.demand_at(t);
        let mut changed = false;
        if k > 0 && should_trigger(demand, last_demand, k, last_k, &d.hl) {
            let new = solve_shares_at(demand, &d.maps, &d.hl, Some(&sol), Some(u_prev))
                .map_err(|e| Error::at(t, e))?;
            report.hl_solve_count += 1;
            last_demand = demand;
            last_k = k;
            changed = new.delta != sol.delta
                || new
                    .alpha
                    .iter()
                    .zip(&sol.alpha)
                    .any(|(a, b)| (a - b).abs() > SHARE_TOL)
                || (new.u_ss - sol.u_ss).abs() > SHARE_TOL;
            if changed {
                if new.delta != sol.delta {
                    report.activations.push((t, new.delta.clone()));
                }
                for i in 0..nb {
                    let q = new.alpha[i] * u_prev;
                    if new.delta[i] && !sol.delta[i] {
                        units[i] = Unit::start(cfg, d, i, q, true).map_err(|e| Error::at(t, e))?;
                    } else if new.delta[i] {
                        // restart the reference model at rest for the new share
                        let x = d.refs[i].steady_state(q).map_err(|e| Error::at(t, e))?;
                        units[i].x_ref = x.clone();
                        units[i].x_ref_slow = x;
                    } else {
                        units[i].active = false;
                    }
                }
                scale = rate_scale(&sol, &new);
                sol = new;
                conf = configure(d, cfg, &sol).map_err(|e| Error::at(t, e))?;
                r = conf.ens.g_bar * sol.u_ss + conf.ens.gamma_bar;
            }
        }

        let mut y_meas = 0.0;
        for u in units.iter().filter(|u| u.active) {
            y_meas += u.cl.gas_command();
            if noise > 0.0 {
                y_meas += rng.gen_range(-noise..=noise);
            }
        }

        // observed mismatch of the ensemble model on measured states
        let mut x_meas = DVector::zeros(conf.ens.n());
        for (i, u) in units.iter().enumerate() {
            if u.active {
                x_meas += &d.refs[i].beta * u.measured_state(&d.ident[i].ss);
            }
        }
        if let (false, Some((xp, up))) = (changed, &prev_w) {
            let s = conf.ens.slow()?;
            let w = &x_meas - &s.a_t * xp - &s.b_t * *up;
            report.max_w_inf = report.max_w_inf.max(w.amax());
        }

        let now: Vec<DVector<f64>> = units.iter().map(|u| u.x_ref.clone()).collect();
        let before: Vec<DVector<f64>> = units.iter().map(|u| u.x_ref_slow.clone()).collect();
        let (xi, _) = reconfigure(&conf.vel, &now, &before, &sol.delta, y_meas, u_prev)?;
        let mpc = solve_mpc(
            &conf.vel,
            &xi,
            u_prev,
            r,
            &sol,
            &d.maps,
            &conf.tight,
            &cfg.mpc,
            scale,
        )
        .map_err(|e| Error::at(t, e))?;
        scale = 1.0;
        let u_bar = mpc.u_applied;
        prev_w = Some((x_meas, u_bar));
        for u in units.iter_mut() {
            u.x_ref_slow = u.x_ref.clone();
        }

        for j in 0..nu {
            let tf = (k * nu + j) as f64 * tau;
            let mut rec = StepRecord {
                t: tf,
                demand: cfg.demand_at(tf),
                r,
                r_hat: mpc.r_hat,
                u_bar,
                y_bar: 0.0,
                u_ss: sol.u_ss,
                boilers: Vec::with_capacity(nb),
            };
            for (i, unit) in units.iter_mut().enumerate() {
                let mut b = BoilerRecord {
                    alpha: sol.alpha[i],
                    delta: sol.delta[i],
                    p: unit.cl.state.p,
                    v_w: unit.cl.state.v_w,
                    ..Default::default()
                };
                if unit.active {
                    let q_s = sol.alpha[i] * u_bar;
                    let (next, q_g, q_f) = closed_loop_step(&unit.cl, q_s)
                        .map_err(|e| Error::at(tf, Error::boiler(i, e)))?;
                    unit.cl = next;
                    unit.x_ref = d.refs[i].step(&unit.x_ref, q_s);
                    unit.y_hist.push_front(q_g);
                    unit.y_hist.pop_back();
                    unit.u_hist.push_front(q_s);
                    unit.u_hist.pop_back();
                    b.q_s = q_s;
                    b.q_g = q_g;
                    b.q_f = q_f;
                    rec.y_bar += q_g;
                }
                rec.boilers.push(b);
            }
            audit(cfg, &rec, &mut report.violations);
            report.records.push(rec);
        }
        u_prev = u_bar;
    }
    Ok(report)
}

fn audit(cfg: &ScenarioConfig, rec: &StepRecord, out: &mut Vec<Violation>) {
    let mut check = |name: String, v: f64, (lo, hi): (f64, f64)| {
        if v < lo - AUDIT_TOL || v > hi + AUDIT_TOL {
            out.push(Violation {
                t: rec.t,
                constraint: name,
                value: v,
                lo,
                hi,
            });
        }
    };
    let mut total_s = 0.0;
    for (i, (b, p)) in rec.boilers.iter().zip(&cfg.boilers).enumerate() {
        if b.delta {
            check(format!("q_s,{}", i + 1), b.q_s, (p.q_s_min, p.q_s_max));
            check(format!("q_g,{}", i + 1), b.q_g, (p.q_g_min, p.q_g_max));
        }
        total_s += b.q_s;
    }
    check("sum q_s".into(), total_s, cfg.u_set);
    check("sum q_g".into(), rec.y_bar, cfg.y_set);
}

/// Exact objective of the share problem at a solution (for diagnostics).
pub fn share_objective(d: &Design, sol: &ShareSolution<f64>, demand: f64) -> f64 {
    share_cost(sol, demand, &d.maps, &d.hl)
}

pub fn csv_header(n_boilers: usize) -> Vec<String> {
    let mut h: Vec<String> = [
        "t_s",
        "demand_kgps",
        "r_kgps",
        "r_hat_kgps",
        "u_bar_kgps",
        "y_bar_kgps",
        "u_ss_kgps",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for i in 1..=n_boilers {
        for c in ["alpha", "delta", "qs", "qg", "qf"] {
            h.push(format!("{c}_{i}"));
        }
        h.push(format!("p_{i}_bar"));
        h.push(format!("Vw_{i}_m3"));
    }
    h
}

fn num(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_timeseries(report: &RunReport, path: &Path) -> Result<()> {
    let io = |e: csv::Error| Error::Io(e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(csv_header(report.n_boilers)).map_err(io)?;
    for r in &report.records {
        let mut row = vec![
            num(r.t),
            num(r.demand),
            num(r.r),
            num(r.r_hat),
            num(r.u_bar),
            num(r.y_bar),
            num(r.u_ss),
        ];
        for b in &r.boilers {
            row.extend([
                num(b.alpha),
                (b.delta as u8).to_string(),
                num(b.q_s),
                num(b.q_g),
                num(b.q_f),
                num(b.p),
                num(b.v_w),
            ]);
        }
        w.write_record(&row).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_timeseries(path: &Path) -> Result<(usize, Vec<StepRecord>)> {
    let io = |e: csv::Error| Error::Io(e.to_string());
    let mut rd = csv::Reader::from_path(path).map_err(io)?;
    let cols = rd.headers().map_err(io)?.len();
    if cols < 7 || (cols - 7) % 7 != 0 {
        return Err(Error::Io(format!("unexpected column count {cols}")));
    }
    let nb = (cols - 7) / 7;
    let parse = |s: &str| s.parse::<f64>().map_err(|e| Error::Io(e.to_string()));
    let mut out = Vec::new();
    for row in rd.records() {
        let row = row.map_err(io)?;
        let v = |j: usize| parse(&row[j]);
        let mut rec = StepRecord {
            t: v(0)?,
            demand: v(1)?,
            r: v(2)?,
            r_hat: v(3)?,
            u_bar: v(4)?,
            y_bar: v(5)?,
            u_ss: v(6)?,
            boilers: Vec::with_capacity(nb),
        };
        for i in 0..nb {
            let o = 7 + 7 * i;
            rec.boilers.push(BoilerRecord {
                alpha: v(o)?,
                delta: &row[o + 1] == "1",
                q_s: v(o + 2)?,
                q_g: v(o + 3)?,
                q_f: v(o + 4)?,
                p: v(o + 5)?,
                v_w: v(o + 6)?,
            });
        }
        out.push(rec);
    }
    Ok((nb, out))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub violations: usize,
    pub max_w_inf: f64,
    pub total_gas_kg: f64,
    pub total_steam_kg: f64,
    pub hl_solve_count: usize,
    pub wall_ms: f64,
}

pub fn summary(report: &RunReport) -> Summary {
    Summary {
        violations: report.violations.len(),
        max_w_inf: report.max_w_inf,
        total_gas_kg: report.total_gas_kg(),
        total_steam_kg: report.total_steam_kg(),
        hl_solve_count: report.hl_solve_count,
        wall_ms: report.wall_ms,
    }
}

fn line(name: &str, pts: Vec<(f64, f64)>, step: bool, dashed: bool) -> Series {
    Series {
        name: name.into(),
        points: pts,
        step,
        dashed,
    }
}

fn plots(report: &RunReport) -> [(&'static str, String); 2] {
    let rec = &report.records;
    let col = |f: &dyn Fn(&StepRecord) -> f64| rec.iter().map(|r| (r.t, f(r))).collect::<Vec<_>>();
    let gas = Panel {
        title: "Ensemble gas".into(),
        y_label: "kg/s".into(),
        series: vec![
            line("y_bar", col(&|r| r.y_bar), true, false),
            line("r", col(&|r| r.r), true, true),
            line("r_hat", col(&|r| r.r_hat), true, true),
        ],
        ..Default::default()
    };
    let steam = Panel {
        title: "Ensemble steam".into(),
        y_label: "kg/s".into(),
        series: vec![
            line("u_bar", col(&|r| r.u_bar), true, false),
            line("demand", col(&|r| r.demand), true, true),
            line("u_ss", col(&|r| r.u_ss), true, true),
        ],
        ..Default::default()
    };
    let ensemble = render(&[gas, steam], "t [s]", 900.0, 300.0);

    let shares = Panel {
        title: "Shares".into(),
        y_label: "alpha (stacked)".into(),
        series: (0..report.n_boilers)
            .map(|i| {
                line(
                    &format!("boiler {}", i + 1),
                    col(&|r| r.boilers[i].alpha),
                    true,
                    false,
                )
            })
            .collect(),
        stacked: true,
        ..Default::default()
    };
    let shares = render(&[shares], "t [s]", 900.0, 320.0);

    [("ensemble.svg", ensemble), ("shares.svg", shares)]
}

/// Per-boiler gas plots with bounds drawn.
fn boiler_plot(report: &RunReport, bounds: &[(f64, f64)]) -> String {
    let rec = &report.records;
    let panels: Vec<Panel> = (0..report.n_boilers)
        .map(|i| Panel {
            title: format!("Boiler {}", i + 1),
            y_label: "q_g kg/s".into(),
            series: vec![line(
                "q_g",
                rec.iter().map(|r| (r.t, r.boilers[i].q_g)).collect(),
                true,
                false,
            )],
            hlines: bounds
                .get(i)
                .map(|b| vec![(b.0, "min".into()), (b.1, "max".into())])
                .unwrap_or_default(),
            stacked: false,
        })
        .collect();
    let panels = if panels.is_empty() {
        vec![Panel::default()]
    } else {
        panels
    };
    render(&panels, "t [s]", 900.0, 180.0)
}

/// Writes timeseries.csv, summary.json and the three plots. `bounds` are
/// the per-boiler gas limits drawn on boilers.svg (may be empty).
pub fn emit_outputs(report: &RunReport, bounds: &[(f64, f64)], out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    write_timeseries(report, &out_dir.join("timeseries.csv"))?;
    let js =
        serde_json::to_string_pretty(&summary(report)).map_err(|e| Error::Io(e.to_string()))?;
    std::fs::write(out_dir.join("summary.json"), js + "\n")?;
    for (name, body) in plots(report) {
        std::fs::write(out_dir.join(name), body)?;
    }
    std::fs::write(out_dir.join("boilers.svg"), boiler_plot(report, bounds))?;
    Ok(())
}
