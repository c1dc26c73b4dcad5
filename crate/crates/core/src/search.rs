//! Evolutionary search over per-layer sparsity distributions.
//!
//! A candidate is a real gene per prunable layer. Decoding over-prunes every
//! layer to the excessive rate `P_e` and hands the freed budget
//! `(P_e − P)·numel` back to layers in proportion to `softmax(genes)`, so
//! every decoded distribution lands on the global target `P` by
//! construction. Fitness prunes the teacher at the decoded rates,
//! recomputes batch-norm statistics on Gaussian-noised calibration inputs
//! and scores accuracy on the clean calibration set.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::CalibrationSet;
use crate::error::{Error, Result};
use crate::nn::{Mode, Network};
use crate::seed::{derive_seed, rng_for, stage};
use crate::sparsity::{SparseMask, SparsityDistribution};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    /// Global target sparsity `P`.
    pub target: f64,
    /// Excessive sparsity `P_e`; `None` means `P + 0.05`.
    pub excessive: Option<f64>,
    pub population: usize,
    pub generations: usize,
    pub tournament: usize,
    /// Probability that a child takes a gene from its second parent.
    pub crossover_rate: f64,
    pub mutation_std: f64,
    pub elites: usize,
    /// Noise std as a multiple of each input channel's std.
    pub noise_std: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            target: 0.9,
            excessive: None,
            population: 32,
            generations: 20,
            tournament: 4,
            crossover_rate: 0.5,
            mutation_std: 0.5,
            elites: 2,
            noise_std: 0.1,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn excessive_rate(&self) -> f64 {
        self.excessive.unwrap_or((self.target + 0.05).min(1.0))
    }

    pub fn validate(&self) -> Result<()> {
        let pe = self.excessive_rate();
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.target) || !(pe <= 1.0) || !(self.target < pe) {
            return bad(format!("need 0 ≤ P < P_e ≤ 1, got P={} P_e={pe}", self.target));
        }
        if self.population < 2 {
            return bad("population must be ≥ 2".into());
        }
        if self.generations == 0 || self.tournament == 0 || self.batch_size == 0 {
            return bad("generations, tournament and batch_size must be ≥ 1".into());
        }
        if self.elites > self.population {
            return bad("more elites than individuals".into());
        }
        if !(0.0..=1.0).contains(&self.crossover_rate) || self.mutation_std < 0.0 || self.noise_std < 0.0 {
            return bad("crossover_rate in [0, 1], mutation_std ≥ 0 and noise_std ≥ 0 required".into());
        }
        Ok(())
    }
}

/// One real gene per prunable layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateGenome {
    pub genes: Vec<f64>,
}

impl CandidateGenome {
    pub fn new(genes: Vec<f64>) -> Result<Self> {
        if genes.iter().any(|g| !g.is_finite()) {
            return Err(Error::Config("genome has non-finite genes".into()));
        }
        Ok(CandidateGenome { genes })
    }

    pub fn random(layers: usize, rng: &mut impl Rng) -> Self {
        CandidateGenome {
            genes: (0..layers).map(|_| rng.sample(StandardNormal)).collect(),
        }
    }
}

pub fn softmax(genes: &[f64]) -> Vec<f64> {
    let max = genes.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = genes.iter().map(|g| (g - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Regrow budget in weights: `(P_e − P)·Σ numel`.
pub fn residual(target: f64, excessive: f64, numels: &[usize]) -> f64 {
    let n = numels.iter().sum::<usize>() as f64;
    excessive * n - target * n
}

/// Regrown weights per layer. A layer whose share would exceed the `P_e·n`
/// weights it lost is capped there (its rate clamps to 0) and the surplus
/// is split among the remaining layers by their softmax weights, until no
/// layer overflows. The result always sums to the residual.
pub fn regrow_allocation(genes: &[f64], numels: &[usize], target: f64, excessive: f64) -> Vec<f64> {
    let weights = softmax(genes);
    let budget = residual(target, excessive, numels);
    let cap: Vec<f64> = numels.iter().map(|&n| excessive * n as f64).collect();
    let mut alloc = vec![0.0; numels.len()];
    let mut active: Vec<bool> = vec![true; numels.len()];
    let mut left = budget;
    loop {
        let wsum: f64 = (0..numels.len()).filter(|&i| active[i]).map(|i| weights[i]).sum();
        if wsum <= 0.0 {
            break;
        }
        let saturated: Vec<usize> = (0..numels.len())
            .filter(|&i| active[i] && left * weights[i] / wsum > cap[i])
            .collect();
        if saturated.is_empty() {
            for i in (0..numels.len()).filter(|&i| active[i]) {
                alloc[i] = left * weights[i] / wsum;
            }
            break;
        }
        for i in saturated {
            alloc[i] = cap[i];
            active[i] = false;
            left -= cap[i];
        }
    }
    alloc
}

/// Genome → per-layer rates `r = P_e − T/numel`.
pub fn decode(genome: &CandidateGenome, numels: &[usize], cfg: &SearchConfig) -> Result<SparsityDistribution> {
    if genome.genes.len() != numels.len() {
        return Err(Error::Shape(format!(
            "genome has {} genes for {} prunable layers",
            genome.genes.len(),
            numels.len()
        )));
    }
    let pe = cfg.excessive_rate();
    let alloc = regrow_allocation(&genome.genes, numels, cfg.target, pe);
    let rates = alloc
        .iter()
        .zip(numels)
        .map(|(t, &n)| {
            let r = pe - t / n as f64;
            // saturated layers land a rounding error away from dense
            if r < 1e-12 { 0.0 } else { r.min(1.0) }
        })
        .collect();
    SparsityDistribution::new(rates, cfg.target)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitnessRecord {
    pub genome: CandidateGenome,
    pub distribution: SparsityDistribution,
    /// Accuracy on the clean calibration set, in `[0, 1]`.
    pub fitness: f64,
    /// Seed of the noise stream used for batch-norm recalibration.
    pub seed: u64,
}

/// Which pass of a fitness evaluation a batch belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataStage {
    Recalibration,
    Evaluation,
}

/// Shared read-only inputs of fitness evaluations.
pub struct FitnessContext<'a> {
    teacher: &'a Network,
    calib: &'a CalibrationSet,
    channel_std: Vec<f64>,
    numels: Vec<usize>,
}

impl<'a> FitnessContext<'a> {
    pub fn new(teacher: &'a Network, calib: &'a CalibrationSet) -> Result<Self> {
        if calib.is_empty() {
            return Err(Error::Empty("calibration set"));
        }
        Ok(FitnessContext {
            teacher,
            calib,
            channel_std: calib.data.channel_std(),
            numels: teacher.prunable_numels(),
        })
    }

    pub fn numels(&self) -> &[usize] {
        &self.numels
    }

    /// Fitness with the noise stream of `(cfg.seed, generation, index)`.
    pub fn evaluate(&self, genome: &CandidateGenome, cfg: &SearchConfig, generation: u64, index: u64) -> Result<FitnessRecord> {
        self.evaluate_observed(genome, cfg, generation, index, &mut |_, _| {})
    }

    /// As [`FitnessContext::evaluate`], reporting every batch fed to the
    /// network together with the pass it belongs to.
    pub fn evaluate_observed(
        &self,
        genome: &CandidateGenome,
        cfg: &SearchConfig,
        generation: u64,
        index: u64,
        observe: &mut dyn FnMut(DataStage, &Tensor),
    ) -> Result<FitnessRecord> {
        let distribution = decode(genome, &self.numels, cfg)?;
        let masks = SparseMask::from_rates(self.teacher, &distribution.rates)?;
        let mut net = self.teacher.clone();
        net.hard_mask(&masks)?;

        let seed = derive_seed(cfg.seed, &[stage::SEARCH_NOISE, generation, index]);
        let mut rng = rng_for(seed, &[]);
        let channels = self.channel_std.len();
        let spatial = self.calib.data.inputs.row_len() / channels.max(1);
        let mut noisy = Vec::new();
        for mut batch in self.calib.data.input_batches(cfg.batch_size) {
            if cfg.noise_std > 0.0 {
                for (k, v) in batch.data_mut().iter_mut().enumerate() {
                    let c = (k / spatial) % channels;
                    let std = cfg.noise_std * self.channel_std[c];
                    if std > 0.0 {
                        *v += Normal::new(0.0, std).unwrap().sample(&mut rng);
                    }
                }
            }
            observe(DataStage::Recalibration, &batch);
            noisy.push(batch);
        }
        net.bn_recalibrate(noisy, None)?;
        net.set_mode(Mode::Eval);

        let mut correct = 0usize;
        let labels = &self.calib.data.labels;
        for (b, batch) in self.calib.data.input_batches(cfg.batch_size).enumerate() {
            observe(DataStage::Evaluation, &batch);
            let pred = net.logits(&batch, None)?.argmax_rows();
            let offset = b * cfg.batch_size;
            correct += pred.iter().enumerate().filter(|(i, &p)| labels[offset + i] == p).count();
        }
        Ok(FitnessRecord {
            genome: genome.clone(),
            distribution,
            fitness: correct as f64 / labels.len() as f64,
            seed,
        })
    }
}

/// Single fitness evaluation with the stream of generation 0, index 0.
pub fn fitness(genome: &CandidateGenome, teacher: &Network, calib: &CalibrationSet, cfg: &SearchConfig) -> Result<FitnessRecord> {
    FitnessContext::new(teacher, calib)?.evaluate(genome, cfg, 0, 0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationStats {
    pub generation: usize,
    pub best: f64,
    pub mean: f64,
    pub worst: f64,
    pub elite_rates: Vec<f64>,
}

impl GenerationStats {
    /// One JSON line for the search log.
    pub fn log_line(&self) -> String {
        serde_json::to_string(self).expect("stats serialize")
    }
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub best: FitnessRecord,
    pub history: Vec<GenerationStats>,
}

fn rank(pop: &[FitnessRecord]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..pop.len()).collect();
    // stable: equal fitness keeps the earlier individual first
    order.sort_by(|&a, &b| pop[b].fitness.total_cmp(&pop[a].fitness));
    order
}

fn stats(generation: usize, pop: &[FitnessRecord]) -> GenerationStats {
    let order = rank(pop);
    let n = pop.len() as f64;
    GenerationStats {
        generation,
        best: pop[order[0]].fitness,
        mean: pop.iter().map(|r| r.fitness).sum::<f64>() / n,
        worst: pop[*order.last().unwrap()].fitness,
        elite_rates: pop[order[0]].distribution.rates.clone(),
    }
}

/// Tournament selection, uniform crossover, Gaussian mutation and elitism
/// over `cfg.generations` generations (the random initial population counts
/// as the first). Elites carry their fitness forward unevaluated, so the
/// best fitness never decreases.
pub fn evolve(teacher: &Network, calib: &CalibrationSet, cfg: &SearchConfig) -> Result<SearchOutcome> {
    evolve_from(teacher, calib, cfg, None)
}

/// [`evolve`] from a given initial population instead of random genomes.
pub fn evolve_from(
    teacher: &Network,
    calib: &CalibrationSet,
    cfg: &SearchConfig,
    initial: Option<Vec<CandidateGenome>>,
) -> Result<SearchOutcome> {
    cfg.validate()?;
    let ctx = FitnessContext::new(teacher, calib)?;
    let layers = ctx.numels().len();
    let genomes = match initial {
        Some(g) => {
            if g.len() != cfg.population {
                return Err(Error::Config(format!("{} initial genomes for population {}", g.len(), cfg.population)));
            }
            g
        }
        None => {
            let mut rng = rng_for(cfg.seed, &[stage::SEARCH_INIT]);
            (0..cfg.population).map(|_| CandidateGenome::random(layers, &mut rng)).collect()
        }
    };
    let mut pop: Vec<FitnessRecord> = genomes
        .iter()
        .enumerate()
        .map(|(i, g)| ctx.evaluate(g, cfg, 0, i as u64))
        .collect::<Result<_>>()?;
    let mut history = vec![stats(0, &pop)];
    let mutation = Normal::new(0.0, cfg.mutation_std).map_err(|e| Error::Config(e.to_string()))?;
    for generation in 1..cfg.generations {
        let mut rng = rng_for(cfg.seed, &[stage::SEARCH_VARIATION, generation as u64]);
        let order = rank(&pop);
        let mut next: Vec<FitnessRecord> = order[..cfg.elites].iter().map(|&i| pop[i].clone()).collect();
        let tournament = |rng: &mut rand_chacha::ChaCha8Rng| -> usize {
            (0..cfg.tournament)
                .map(|_| rng.random_range(0..pop.len()))
                .reduce(|a, b| if pop[b].fitness > pop[a].fitness { b } else { a })
                .unwrap()
        };
        let mut children = Vec::new();
        while next.len() + children.len() < cfg.population {
            let a = tournament(&mut rng);
            let b = tournament(&mut rng);
            let genes = pop[a]
                .genome
                .genes
                .iter()
                .zip(&pop[b].genome.genes)
                .map(|(&ga, &gb)| {
                    let g = if rng.random::<f64>() < cfg.crossover_rate { gb } else { ga };
                    if cfg.mutation_std > 0.0 {
                        g + mutation.sample(&mut rng)
                    } else {
                        g
                    }
                })
                .collect();
            children.push(CandidateGenome { genes });
        }
        for (k, child) in children.iter().enumerate() {
            let index = (next.len() + k) as u64;
            let rec = ctx.evaluate(child, cfg, generation as u64, index)?;
            next.push(rec);
        }
        pop = next;
        history.push(stats(generation, &pop));
    }
    let best = pop[rank(&pop)[0]].clone();
    Ok(SearchOutcome { best, history })
}
