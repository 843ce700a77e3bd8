//! Gradient descent on the collage loss (ascent on the critic score),
//! interleaved with microbial-GA tournaments over a small population.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::critics::{evaluate_layout, LossAggregation, RegionLayout};
use crate::error::{Error, Result};
use crate::genome::{
    CanvasSpec, CollageGenome, GradientBundle, RenderMode, COLOR_OFFSET, ORDER_OFFSET,
    PARAMS_PER_PATCH,
};
use crate::patches::PatchLibrary;
use crate::render::{backward, render_canvas};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamGroups {
    pub affine: f64,
    pub color: f64,
    pub order: f64,
}

impl ParamGroups {
    pub const fn uniform(v: f64) -> Self {
        Self {
            affine: v,
            color: v,
            order: v,
        }
    }

    /// Value for raw-parameter slot `k` of a patch.
    #[inline]
    pub fn for_slot(&self, k: usize) -> f64 {
        if k < COLOR_OFFSET {
            self.affine
        } else if k < ORDER_OFFSET {
            self.color
        } else {
            self.order
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum UpdateRule {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    PlainSgd,
}

impl Default for UpdateRule {
    fn default() -> Self {
        UpdateRule::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub steps: usize,
    pub learning_rates: ParamGroups,
    pub method: UpdateRule,
    /// Maximum L2 norm of each patch's 10-parameter gradient.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    /// Score region critics concurrently. Results are identical either way.
    pub parallel_critics: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            learning_rates: ParamGroups::uniform(0.05),
            method: UpdateRule::default(),
            grad_clip: Some(5.0),
            seed: 0,
            parallel_critics: true,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidConfig("steps must be >= 1".into()));
        }
        let lr = self.learning_rates;
        if !(lr.affine > 0.0 && lr.color > 0.0 && lr.order > 0.0) {
            return Err(Error::InvalidConfig("learning rates must be positive".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::InvalidConfig("grad_clip must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvolutionConfig {
    pub enabled: bool,
    pub population: usize,
    /// Gradient steps between tournaments.
    pub period: usize,
    pub p_swap: f64,
    pub sigma: ParamGroups,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            population: 4,
            period: 100,
            p_swap: 0.05,
            sigma: ParamGroups::uniform(0.02),
        }
    }
}

impl EvolutionConfig {
    pub fn disabled(population: usize) -> Self {
        Self {
            enabled: false,
            population,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.enabled && !(2..=10).contains(&self.population) {
            return Err(Error::InvalidConfig(format!(
                "population must be in [2, 10] with evolution enabled, got {}",
                self.population
            )));
        }
        if self.population == 0 {
            return Err(Error::InvalidConfig("population must be >= 1".into()));
        }
        if self.period == 0 {
            return Err(Error::InvalidConfig("tournament period must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.p_swap) {
            return Err(Error::InvalidConfig("p_swap must be in [0, 1]".into()));
        }
        let s = self.sigma;
        if !(s.affine >= 0.0 && s.color >= 0.0 && s.order >= 0.0) {
            return Err(Error::InvalidConfig("mutation sigma must be non-negative".into()));
        }
        Ok(())
    }
}

/// First/second moments for one patch's parameters.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Moments {
    pub m: [f64; PARAMS_PER_PATCH],
    pub v: [f64; PARAMS_PER_PATCH],
    pub t: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Member {
    pub genome: CollageGenome,
    pub moments: Vec<Moments>,
    pub last_loss: Option<f64>,
}

impl Member {
    pub fn new(genome: CollageGenome) -> Self {
        let n = genome.states.len();
        Self {
            genome,
            moments: vec![Moments::default(); n],
            last_loss: None,
        }
    }

    pub fn reset_moments(&mut self) {
        self.moments.iter_mut().for_each(|m| *m = Moments::default());
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Population {
    pub members: Vec<Member>,
}

impl Population {
    #[allow(clippy::too_many_arguments)]
    pub fn random<R: Rng + ?Sized>(
        size: usize,
        num_states: usize,
        library_len: usize,
        mode: RenderMode,
        canvas: CanvasSpec,
        base_scale: f64,
        rng: &mut R,
    ) -> Self {
        let members = (0..size)
            .map(|_| {
                Member::new(CollageGenome::random(
                    num_states,
                    library_len,
                    mode,
                    canvas,
                    base_scale,
                    rng,
                ))
            })
            .collect();
        Self { members }
    }

    pub fn from_genomes(genomes: Vec<CollageGenome>) -> Self {
        Self {
            members: genomes.into_iter().map(Member::new).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Lowest recorded loss; ties go to the lower index. Members without a
    /// loss rank last.
    pub fn best(&self) -> usize {
        let mut best = 0;
        for (i, m) in self.members.iter().enumerate().skip(1) {
            let cur = self.members[best].last_loss.unwrap_or(f64::INFINITY);
            if m.last_loss.unwrap_or(f64::INFINITY) < cur {
                best = i;
            }
        }
        best
    }
}

/// Independent random streams derived from one master seed, so that the
/// number of draws in one stream never shifts another.
#[derive(Clone, Debug, PartialEq)]
pub struct RngStreams {
    pub init: ChaCha8Rng,
    pub mutation: ChaCha8Rng,
    pub tournament: ChaCha8Rng,
}

impl RngStreams {
    pub fn from_seed(seed: u64) -> Self {
        let stream = |id: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(id);
            r
        };
        Self {
            init: stream(1),
            mutation: stream(2),
            tournament: stream(3),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub genome_id: usize,
    pub loss: f64,
}

pub fn write_trace_csv(rows: &[TraceRow], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "step,genome_id,loss")?;
    for r in rows {
        writeln!(f, "{},{},{:e}", r.step, r.genome_id, r.loss)?;
    }
    f.flush()?;
    Ok(())
}

/// Loss and parameter gradient for one genome.
pub fn loss_and_grad(
    genome: &CollageGenome,
    library: &PatchLibrary,
    layout: &RegionLayout,
    agg: LossAggregation,
    parallel_critics: bool,
) -> Result<(f64, GradientBundle)> {
    let image = render_canvas(genome, library)?;
    let report = evaluate_layout(layout, agg, &image, parallel_critics)?;
    let grad = backward(genome, library, &report.grad)?;
    Ok((report.aggregate, grad))
}

/// Loss only.
pub fn loss_of(
    genome: &CollageGenome,
    library: &PatchLibrary,
    layout: &RegionLayout,
    agg: LossAggregation,
    parallel_critics: bool,
) -> Result<f64> {
    let image = render_canvas(genome, library)?;
    Ok(evaluate_layout(layout, agg, &image, parallel_critics)?.aggregate)
}

/// Clips then applies one update to every patch of `member`.
pub fn apply_update(member: &mut Member, grad: &GradientBundle, config: &OptimizerConfig) {
    for ((state, moments), g) in member
        .genome
        .states
        .iter_mut()
        .zip(member.moments.iter_mut())
        .zip(&grad.per_patch)
    {
        let mut g = *g;
        if let Some(clip) = config.grad_clip {
            let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > clip {
                let k = clip / norm;
                g.iter_mut().for_each(|v| *v *= k);
            }
        }
        let mut p = state.params();
        match config.method {
            UpdateRule::PlainSgd => {
                for k in 0..PARAMS_PER_PATCH {
                    p[k] -= config.learning_rates.for_slot(k) * g[k];
                }
            }
            UpdateRule::Adam { beta1, beta2, eps } => {
                moments.t += 1;
                let bc1 = 1.0 - beta1.powi(moments.t as i32);
                let bc2 = 1.0 - beta2.powi(moments.t as i32);
                for k in 0..PARAMS_PER_PATCH {
                    moments.m[k] = beta1 * moments.m[k] + (1.0 - beta1) * g[k];
                    moments.v[k] = beta2 * moments.v[k] + (1.0 - beta2) * g[k] * g[k];
                    let m_hat = moments.m[k] / bc1;
                    let v_hat = moments.v[k] / bc2;
                    p[k] -= config.learning_rates.for_slot(k) * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
        state.set_params(&p);
    }
}

/// One gradient step for every member. Nothing is modified unless every
/// member's critic evaluation succeeds.
pub fn step(
    population: &mut Population,
    library: &PatchLibrary,
    layout: &RegionLayout,
    agg: LossAggregation,
    config: &OptimizerConfig,
) -> Result<Vec<f64>> {
    let results: Vec<(f64, GradientBundle)> = population
        .members
        .par_iter()
        .map(|m| loss_and_grad(&m.genome, library, layout, agg, config.parallel_critics))
        .collect::<Result<_>>()?;
    let mut losses = Vec::with_capacity(results.len());
    for (member, (loss, grad)) in population.members.iter_mut().zip(results) {
        apply_update(member, &grad, config);
        member.last_loss = Some(loss);
        losses.push(loss);
    }
    Ok(losses)
}

/// Patch swap with probability `p_swap`, then Gaussian jitter on every raw
/// parameter. The same number of draws is taken whatever the settings.
pub fn mutate<R: Rng + ?Sized>(
    genome: &mut CollageGenome,
    library_len: usize,
    p_swap: f64,
    sigma: &ParamGroups,
    rng: &mut R,
) {
    for state in &mut genome.states {
        let u: f64 = rng.random();
        let candidate = rng.random_range(0..library_len.max(1));
        if u < p_swap {
            state.patch_id = candidate;
        }
        let mut p = state.params();
        for (k, v) in p.iter_mut().enumerate() {
            let z: f64 = StandardNormal.sample(rng);
            let s = sigma.for_slot(k);
            if s > 0.0 {
                *v += s * z;
            }
        }
        state.set_params(&p);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TournamentOutcome {
    pub winner: usize,
    pub loser: usize,
}

/// Microbial tournament: two distinct members are drawn, the one with the
/// higher recorded loss is overwritten by a mutated copy of the other.
pub fn tournament<R1: Rng + ?Sized, R2: Rng + ?Sized>(
    population: &mut Population,
    library_len: usize,
    evolution: &EvolutionConfig,
    selection_rng: &mut R1,
    mutation_rng: &mut R2,
) -> Result<TournamentOutcome> {
    let n = population.len();
    if n < 2 {
        return Err(Error::InvalidConfig("tournament needs at least two genomes".into()));
    }
    let a = selection_rng.random_range(0..n);
    let mut b = selection_rng.random_range(0..n - 1);
    if b >= a {
        b += 1;
    }
    let loss = |i: usize| {
        population.members[i]
            .last_loss
            .ok_or_else(|| Error::InvalidConfig(format!("genome {i} has no recorded loss")))
    };
    let (la, lb) = (loss(a)?, loss(b)?);
    let (lo, hi) = (a.min(b), a.max(b));
    let (l_lo, l_hi) = if lo == a { (la, lb) } else { (lb, la) };
    let (winner, loser) = if l_hi < l_lo { (hi, lo) } else { (lo, hi) };

    let mut child = population.members[winner].genome.clone();
    mutate(&mut child, library_len, evolution.p_swap, &evolution.sigma, mutation_rng);
    let winner_loss = population.members[winner].last_loss;
    let loser_member = &mut population.members[loser];
    loser_member.genome = child;
    loser_member.reset_moments();
    loser_member.last_loss = winner_loss;
    Ok(TournamentOutcome { winner, loser })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub best_index: usize,
    pub best_genome: CollageGenome,
    pub best_loss: f64,
    pub trace: Vec<TraceRow>,
    pub tournaments: usize,
}

/// Owns a population, its random streams and the step counter.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    pub evolution: EvolutionConfig,
    pub population: Population,
    pub rngs: RngStreams,
    pub step: usize,
    pub trace: Vec<TraceRow>,
    pub tournaments: usize,
}

impl Optimizer {
    /// Draws the initial population from the `init` stream of `config.seed`.
    pub fn new(
        config: OptimizerConfig,
        evolution: EvolutionConfig,
        library: &PatchLibrary,
        num_states: usize,
        mode: RenderMode,
        canvas: CanvasSpec,
        base_scale: f64,
    ) -> Result<Self> {
        config.validate()?;
        evolution.validate()?;
        let mut rngs = RngStreams::from_seed(config.seed);
        let population = Population::random(
            evolution.population,
            num_states,
            library.len(),
            mode,
            canvas,
            base_scale,
            &mut rngs.init,
        );
        Ok(Self::with_population(config, evolution, population, rngs))
    }

    pub fn with_population(
        config: OptimizerConfig,
        evolution: EvolutionConfig,
        population: Population,
        rngs: RngStreams,
    ) -> Self {
        Self {
            config,
            evolution,
            population,
            rngs,
            step: 0,
            trace: Vec::new(),
            tournaments: 0,
        }
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.config.steps
    }

    /// One gradient step, followed by a tournament when one is due.
    pub fn advance(
        &mut self,
        library: &PatchLibrary,
        layout: &RegionLayout,
        agg: LossAggregation,
    ) -> Result<Vec<f64>> {
        let losses = step(&mut self.population, library, layout, agg, &self.config)?;
        for (genome_id, &loss) in losses.iter().enumerate() {
            self.trace.push(TraceRow {
                step: self.step,
                genome_id,
                loss,
            });
        }
        self.step += 1;
        if self.evolution.enabled && self.step.is_multiple_of(self.evolution.period) {
            tournament(
                &mut self.population,
                library.len(),
                &self.evolution,
                &mut self.rngs.tournament,
                &mut self.rngs.mutation,
            )?;
            self.tournaments += 1;
        }
        Ok(losses)
    }

    pub fn run(
        &mut self,
        library: &PatchLibrary,
        layout: &RegionLayout,
        agg: LossAggregation,
    ) -> Result<RunSummary> {
        while !self.is_finished() {
            self.advance(library, layout, agg)?;
        }
        Ok(self.summary())
    }

    pub fn summary(&self) -> RunSummary {
        let best = self.population.best();
        let member = &self.population.members[best];
        RunSummary {
            best_index: best,
            best_genome: member.genome.clone(),
            best_loss: member.last_loss.unwrap_or(f64::NAN),
            trace: self.trace.clone(),
            tournaments: self.tournaments,
        }
    }
}

/// Runs `config.steps` steps over `population` with a tournament every
/// `evolution.period` steps when evolution is enabled.
pub fn run(
    config: &OptimizerConfig,
    evolution: &EvolutionConfig,
    population: Population,
    library: &PatchLibrary,
    layout: &RegionLayout,
    agg: LossAggregation,
) -> Result<RunSummary> {
    config.validate()?;
    evolution.validate()?;
    let rngs = RngStreams::from_seed(config.seed);
    let mut opt = Optimizer::with_population(config.clone(), evolution.clone(), population, rngs);
    opt.run(library, layout, agg)
}
