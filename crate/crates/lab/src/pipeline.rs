//! Stages of a run and the files they leave under the output root.
//!
//! ```text
//! <out>/data/{train,test,probe}.timd   data/STAMP
//! <out>/models/teacher.timm            models/teacher.stamp
//! <out>/models/<variant>.timm          models/<variant>.stamp
//! <out>/reports/pretrain_losses.csv    reports/<variant>_losses.csv
//! <out>/reports/<variant>.json
//! <out>/matrices/<variant>/*.{csv,pgm}
//! <out>/sweep/m<m>_eta<eta>_eps<n>/{model.timm,losses.csv,report.json}
//! <out>/sweep/<variant>.json            (list of point reports)
//! ```
//!
//! A stage that needs an earlier artifact loads it when its stamp (the
//! `key = value` lines of every config key it depends on) matches the current
//! config, and rebuilds it otherwise. Explicit subcommands always rebuild.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use tima_core::data::{generate_shifted_probe, generate_synthetic, Dataset};
use tima_core::harness::{evaluate, finetune, pretrain_clean, similarity_matrices, Variant};
use tima_core::model::{snapshot_teacher, DualEncoder, TeacherSnapshot};

use crate::config::{PixelFraction, RunConfig, Stage};
use crate::export::export_similarity_matrices;
use crate::formats::{load_checkpoint, load_dataset, save_checkpoint, save_dataset};
use crate::report::{write_report, ConfusionRow, EvalReport, MatrixFile, OrderedMap, ProbeResult};

const DATA_STAGES: &[Stage] = &[Stage::Data];
const TEACHER_STAGES: &[Stage] = &[Stage::Data, Stage::Model, Stage::Pretrain];
const STUDENT_STAGES: &[Stage] = &[Stage::Data, Stage::Model, Stage::Pretrain, Stage::Finetune];

pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
    pub probe: Dataset,
}

pub struct Pipeline {
    cfg: RunConfig,
    root: PathBuf,
}

impl Pipeline {
    pub fn new(cfg: RunConfig) -> Self {
        let root = cfg.out.clone();
        Self { cfg, root }
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn dir(&self, name: &str) -> Result<PathBuf> {
        let dir = self.root.join(name);
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir)
    }

    fn variant(&self) -> Variant {
        self.cfg.finetune.variant
    }

    pub fn gen_data(&self) -> Result<Splits> {
        let spec = self.cfg.spec();
        let (train, test) = generate_synthetic(&spec)?;
        let probe = generate_shifted_probe(&spec, self.cfg.probe_seed(), self.cfg.probe_shift)?;
        let dir = self.dir("data")?;
        save_dataset(&train, &dir.join("train.timd"))?;
        save_dataset(&test, &dir.join("test.timd"))?;
        save_dataset(&probe, &dir.join("probe.timd"))?;
        // probe_shift lives with the eval keys but shapes the probe file
        let stamp = format!(
            "{}probe_shift = {}\n",
            self.cfg.stamp(DATA_STAGES),
            self.cfg.probe_shift
        );
        fs::write(dir.join("STAMP"), stamp)?;
        Ok(Splits { train, test, probe })
    }

    pub fn data(&self) -> Result<Splits> {
        let dir = self.root.join("data");
        let stamp = format!(
            "{}probe_shift = {}\n",
            self.cfg.stamp(DATA_STAGES),
            self.cfg.probe_shift
        );
        if !stamp_matches(&dir.join("STAMP"), &stamp) {
            return self.gen_data();
        }
        Ok(Splits {
            train: load_dataset(&dir.join("train.timd"))?,
            test: load_dataset(&dir.join("test.timd"))?,
            probe: load_dataset(&dir.join("probe.timd"))?,
        })
    }

    pub fn pretrain(&self) -> Result<DualEncoder> {
        let data = self.data()?;
        let fresh = DualEncoder::new(self.cfg.encoder())?.with_temperature(self.cfg.temperature)?;
        let outcome = pretrain_clean(&fresh, &data.train, &self.cfg.pretrain_config())?;
        let models = self.dir("models")?;
        save_checkpoint(&outcome.model, &models.join("teacher.timm"))?;
        fs::write(
            self.dir("reports")?.join("pretrain_losses.csv"),
            loss_csv(&outcome.epoch_losses),
        )?;
        fs::write(models.join("teacher.stamp"), self.cfg.stamp(TEACHER_STAGES))?;
        Ok(outcome.model)
    }

    pub fn teacher(&self) -> Result<TeacherSnapshot> {
        let models = self.root.join("models");
        let model = if stamp_matches(
            &models.join("teacher.stamp"),
            &self.cfg.stamp(TEACHER_STAGES),
        ) {
            load_checkpoint(&models.join("teacher.timm"))?
        } else {
            self.pretrain()?
        };
        Ok(snapshot_teacher(&model)?)
    }

    pub fn finetune(&self) -> Result<DualEncoder> {
        let data = self.data()?;
        let teacher = self.teacher()?;
        let name = self.variant().name();
        let outcome = finetune(
            teacher.model(),
            &teacher,
            &data.train,
            &self.cfg.finetune_config(),
        )?;
        let models = self.dir("models")?;
        save_checkpoint(&outcome.model, &models.join(format!("{name}.timm")))?;
        fs::write(
            self.dir("reports")?.join(format!("{name}_losses.csv")),
            loss_csv(&outcome.epoch_losses),
        )?;
        fs::write(
            models.join(format!("{name}.stamp")),
            self.cfg.stamp(STUDENT_STAGES),
        )?;
        Ok(outcome.model)
    }

    pub fn student(&self) -> Result<DualEncoder> {
        let models = self.root.join("models");
        let name = self.variant().name();
        if stamp_matches(
            &models.join(format!("{name}.stamp")),
            &self.cfg.stamp(STUDENT_STAGES),
        ) {
            Ok(load_checkpoint(&models.join(format!("{name}.timm")))?)
        } else {
            self.finetune()
        }
    }

    /// Writes the matrices of the current variant and returns the manifest.
    pub fn export_matrices(&self) -> Result<Vec<MatrixFile>> {
        let data = self.data()?;
        let teacher = self.teacher()?;
        let student = self.student()?;
        self.export_for(
            &student,
            &teacher,
            &data.test,
            "matrices",
            self.variant().name(),
        )
    }

    fn export_for(
        &self,
        student: &DualEncoder,
        teacher: &TeacherSnapshot,
        test: &Dataset,
        parent: &str,
        name: &str,
    ) -> Result<Vec<MatrixFile>> {
        let radii = &self.cfg.eval_epsilons;
        let values: Vec<f64> = radii.iter().map(|e| e.value()).collect();
        let matrices =
            similarity_matrices(student, teacher, test, &values, &self.cfg.eval_attack())?;
        let rel = format!("{parent}/{name}");
        let dir = self.dir(parent)?.join(name);
        Ok(export_similarity_matrices(&matrices, radii, &dir, &rel)?)
    }

    /// Evaluates the current variant, exports its matrices, and writes
    /// `reports/<variant>.json`.
    pub fn eval(&self) -> Result<EvalReport> {
        let data = self.data()?;
        let teacher = self.teacher()?;
        let student = self.student()?;
        let name = self.variant().name();
        let matrices = self.export_for(&student, &teacher, &data.test, "matrices", name)?;
        let report = self.report(&student, &teacher, &data, &self.cfg, matrices)?;
        write_report(&report, &self.dir("reports")?.join(format!("{name}.json")))?;
        Ok(report)
    }

    fn report(
        &self,
        student: &DualEncoder,
        teacher: &TeacherSnapshot,
        data: &Splits,
        cfg: &RunConfig,
        matrices: Vec<MatrixFile>,
    ) -> Result<EvalReport> {
        let radii = &self.cfg.eval_epsilons;
        let values: Vec<f64> = radii.iter().map(|e| e.value()).collect();
        let template = self.cfg.eval_attack();
        let m = evaluate(student, teacher, &data.test, &values, &template)?;
        let probe = evaluate(student, teacher, &data.probe, &values, &template)?;
        Ok(EvalReport {
            config: OrderedMap(
                cfg.echo()
                    .into_iter()
                    .map(|(k, v)| (k.to_string(), v))
                    .collect(),
            ),
            seed: cfg.seed,
            variant: cfg.finetune.variant.name().to_string(),
            clean_accuracy: m.clean_accuracy,
            robust_accuracy: by_radius(radii, &m.robust_accuracy),
            text_min_distance: m.text_min_distance,
            text_mean_distance: m.text_mean_distance,
            teacher_text_min_distance: m.teacher_text_min_distance,
            teacher_text_mean_distance: m.teacher_text_mean_distance,
            text_block_gap: m.text_block_gap,
            teacher_text_block_gap: m.teacher_text_block_gap,
            superclass_confusion: m
                .superclass_confusion
                .iter()
                .map(ConfusionRow::from)
                .collect(),
            probe: ProbeResult {
                shift: cfg.probe_shift,
                clean_accuracy: probe.clean_accuracy,
                robust_accuracy: by_radius(radii, &probe.robust_accuracy),
            },
            matrices,
        })
    }

    /// Fine-tunes and evaluates the current variant at every point of the
    /// (m, η, training ε) grid, sharing data and teacher. Writes one report
    /// per point plus `sweep/<variant>.json` listing them.
    pub fn sweep(&self) -> Result<Vec<(String, EvalReport)>> {
        let data = self.data()?;
        let teacher = self.teacher()?;
        let sweep_dir = self.dir("sweep")?;
        let mut out = Vec::new();
        for &m in &self.cfg.sweep_margins {
            for &eta in &self.cfg.sweep_etas {
                for &eps in &self.cfg.sweep_epsilons {
                    let point = self.point(m, eta, eps);
                    let name = format!("{}_m{m}_eta{eta}_eps{}", self.variant().name(), eps.0);
                    let dir = sweep_dir.join(&name);
                    fs::create_dir_all(&dir)?;
                    let outcome = finetune(
                        teacher.model(),
                        &teacher,
                        &data.train,
                        &point.finetune_config(),
                    )?;
                    save_checkpoint(&outcome.model, &dir.join("model.timm"))?;
                    fs::write(dir.join("losses.csv"), loss_csv(&outcome.epoch_losses))?;
                    let report =
                        self.report(&outcome.model, &teacher, &data, &point, Vec::new())?;
                    write_report(&report, &dir.join("report.json"))?;
                    out.push((format!("sweep/{name}/report.json"), report));
                }
            }
        }
        let index: Vec<&str> = out.iter().map(|(p, _)| p.as_str()).collect();
        let mut listing = serde_json::to_string_pretty(&index)?;
        listing.push('\n');
        fs::write(
            sweep_dir.join(format!("{}.json", self.variant().name())),
            listing,
        )?;
        Ok(out)
    }

    fn point(&self, margin: f64, eta: f64, eps: PixelFraction) -> RunConfig {
        let mut cfg = self.cfg.clone();
        cfg.finetune.loss_weights.margin = margin;
        cfg.finetune.loss_weights.eta = eta;
        cfg.train_epsilon = eps;
        cfg
    }
}

fn stamp_matches(path: &Path, expected: &str) -> bool {
    fs::read_to_string(path).is_ok_and(|s| s == expected)
}

fn loss_csv(losses: &[f64]) -> String {
    let mut out = String::from("epoch,loss\n");
    for (i, l) in losses.iter().enumerate() {
        out.push_str(&format!("{i},{l}\n"));
    }
    out
}

fn by_radius(radii: &[PixelFraction], accs: &[(f64, f64)]) -> OrderedMap<f64> {
    OrderedMap(
        radii
            .iter()
            .zip(accs)
            .map(|(e, (_, a))| (e.to_string(), *a))
            .collect(),
    )
}
