use rayon::prelude::*;

use super::{PrecisionSchedule, ScheduleEvaluator};
use crate::error::{Error, Result};
use crate::metrics::rouge_l;
use crate::tinylm::{generate, GenerationTrace, ModelVariants, SamplerConfig};

/// Mean Rouge-L F1 of generations under a schedule against reference
/// generations from the model's reference precision.
pub struct FidelityEvaluator<'a> {
    model: &'a ModelVariants,
    prompts: Vec<Vec<u32>>,
    references: Vec<GenerationTrace>,
    sampler: SamplerConfig,
    eos: Option<u32>,
    max_new: usize,
    skipped: usize,
}

impl<'a> FidelityEvaluator<'a> {
    /// Generates the reference outputs. Prompts whose reference is empty are
    /// dropped and counted in [`ScheduleEvaluator::skipped_prompts`].
    pub fn new(
        model: &'a ModelVariants,
        prompts: &[Vec<u32>],
        sampler: SamplerConfig,
        eos: Option<u32>,
        max_new: usize,
    ) -> Result<Self> {
        if prompts.is_empty() {
            return Err(Error::Input("evaluation prompt set is empty".into()));
        }
        let p_ref = model.reference_precision();
        let reference_schedule = PrecisionSchedule::uniform(p_ref, p_ref, max_new)?;
        let traces = prompts
            .par_iter()
            .map(|p| generate(model, p, &reference_schedule, sampler, eos, max_new))
            .collect::<Result<Vec<_>>>()?;
        let mut kept_prompts = Vec::new();
        let mut references = Vec::new();
        let mut skipped = 0;
        for (prompt, trace) in prompts.iter().zip(traces) {
            if trace.text_tokens().is_empty() {
                log::warn!("skipping prompt with empty reference output");
                skipped += 1;
            } else {
                kept_prompts.push(prompt.clone());
                references.push(trace);
            }
        }
        if references.is_empty() {
            return Err(Error::Input("every reference generation was empty".into()));
        }
        Ok(Self {
            model,
            prompts: kept_prompts,
            references,
            sampler,
            eos,
            max_new,
            skipped,
        })
    }

    pub fn references(&self) -> &[GenerationTrace] {
        &self.references
    }

    pub fn max_new(&self) -> usize {
        self.max_new
    }

    /// Per-prompt traces and fidelities under `schedule`.
    pub fn run(&self, schedule: &PrecisionSchedule) -> Result<Vec<(GenerationTrace, f64)>> {
        if schedule.horizon() < self.max_new {
            return Err(Error::Config(format!(
                "schedule horizon {} shorter than generation length {}",
                schedule.horizon(),
                self.max_new
            )));
        }
        self.prompts
            .par_iter()
            .zip(&self.references)
            .map(|(prompt, reference)| {
                let t = generate(self.model, prompt, schedule, self.sampler, self.eos, self.max_new)?;
                let f = rouge_l(t.text_tokens(), reference.text_tokens()).f1;
                Ok((t, f))
            })
            .collect()
    }
}

impl ScheduleEvaluator for FidelityEvaluator<'_> {
    fn quality(&self, schedule: &PrecisionSchedule) -> Result<f64> {
        let runs = self.run(schedule)?;
        Ok(runs.iter().map(|(_, f)| f).sum::<f64>() / runs.len() as f64)
    }

    fn skipped_prompts(&self) -> usize {
        self.skipped
    }
}
