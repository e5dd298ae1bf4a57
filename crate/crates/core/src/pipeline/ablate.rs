use serde::{Deserialize, Serialize};

use crate::cma::TOKEN_COUNTS;
use crate::error::Result;

use super::config::{ModalityToggles, ModuleToggles, RunConfig};
use super::model::Model;
use super::train::{toy_data, train_toy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationGroup {
    /// Abstract token counts 8, 16, 24, 32.
    Tokens,
    /// Every non-empty subset of lidar / occ / desc on top of image.
    Modalities,
    /// TMM and CMA on and off.
    Modules,
}

impl AblationGroup {
    pub const ALL: [AblationGroup; 3] = [AblationGroup::Tokens, AblationGroup::Modalities, AblationGroup::Modules];

    pub fn name(self) -> &'static str {
        match self {
            AblationGroup::Tokens => "tokens",
            AblationGroup::Modalities => "modalities",
            AblationGroup::Modules => "modules",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub group: AblationGroup,
    pub modalities: String,
    pub tmm: bool,
    pub cma: bool,
    pub num_tokens: usize,
    pub test_accuracy: f64,
    pub masked_accuracy: Option<f64>,
    pub relevant_weights: [f64; 3],
    pub final_loss: f64,
    /// Rows of the abstraction for one test sample; `None` when CMA is off.
    pub abstract_rows: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seed: u64,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{:<10} {:<22} {:<4} {:<4} {:>3}  {:>8}  {:>8}  {:>8}  {:<20}  {}\n",
            "group", "modalities", "tmm", "cma", "K", "acc", "masked", "loss", "w_rel(l/o/d)", "F_A rows"
        );
        let onoff = |b: bool| if b { "on" } else { "off" };
        for r in &self.rows {
            let masked = r.masked_accuracy.map_or("n/a".to_string(), |a| format!("{a:.4}"));
            let w = r.relevant_weights;
            let rows = r.abstract_rows.map_or("-".to_string(), |k| k.to_string());
            s.push_str(&format!(
                "{:<10} {:<22} {:<4} {:<4} {:>3}  {:>8.4}  {:>8}  {:>8.5}  {:.3}/{:.3}/{:.3}   {}\n",
                r.group.name(),
                r.modalities,
                onoff(r.tmm),
                onoff(r.cma),
                r.num_tokens,
                r.test_accuracy,
                masked,
                r.final_loss,
                w[0],
                w[1],
                w[2],
                rows
            ));
        }
        s
    }
}

/// Configurations for one group, derived from `base`.
pub fn grid(base: &RunConfig, group: AblationGroup) -> Vec<RunConfig> {
    match group {
        AblationGroup::Tokens => TOKEN_COUNTS
            .iter()
            .map(|&k| {
                let mut c = base.clone();
                c.cma.num_tokens = k;
                c
            })
            .collect(),
        AblationGroup::Modalities => (1u8..8)
            .map(|bits| {
                let mut c = base.clone();
                c.modalities = ModalityToggles {
                    lidar: bits & 1 != 0,
                    occ: bits & 2 != 0,
                    desc: bits & 4 != 0,
                };
                c
            })
            .collect(),
        AblationGroup::Modules => [(false, false), (true, false), (false, true), (true, true)]
            .iter()
            .map(|&(tmm, cma)| {
                let mut c = base.clone();
                c.modules = ModuleToggles { tmm, cma };
                c
            })
            .collect(),
    }
}

fn run_one(config: &RunConfig, group: AblationGroup) -> Result<AblationRow> {
    let (report, model) = train_toy(config)?;
    let data = toy_data(config)?;
    let abstract_rows = match data.test.first() {
        Some(ex) => model
            .predict(&ex.sample, &Model::control(config), config.modules.cma)?
            .abstraction
            .map(|a| a.rows()),
        None => None,
    };
    Ok(AblationRow {
        group,
        modalities: config.modalities.label(),
        tmm: config.modules.tmm,
        cma: config.modules.cma,
        num_tokens: config.cma.num_tokens,
        test_accuracy: report.test_accuracy,
        masked_accuracy: report.masked_accuracy,
        relevant_weights: report.relevant_weights(),
        final_loss: report.final_loss().unwrap_or(f64::NAN),
        abstract_rows,
    })
}

pub fn run_ablation(base: &RunConfig, groups: &[AblationGroup]) -> Result<AblationReport> {
    base.validate()?;
    let mut rows = Vec::new();
    for &g in groups {
        for c in grid(base, g) {
            rows.push(run_one(&c, g)?);
        }
    }
    Ok(AblationReport { seed: base.seed, rows })
}
