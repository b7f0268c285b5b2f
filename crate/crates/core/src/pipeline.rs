//! Run-directory orchestration shared by the command line and the
//! acceptance suite: each stage writes its checkpoint, logs and reports
//! into one output directory.
//!
//! ```text
//! <out>/manifest.toml            command, resolved config, seed, version, paths, timestamps
//! <out>/config.toml              resolved config snapshot
//! <out>/metrics.txt              one record per epoch (losses, mAP, R1, live channels, norms)
//! <out>/run.log                  one record per step (losses, mask statistics)
//! <out>/{teacher,student}.ckpt   model, optimizer state and config
//! <out>/slim.ckpt                converted model, conversion report in its metadata
//! <out>/conversion_report.txt
//! <out>/eval_report.txt
//! ```

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::checkpoint::{Checkpoint, META_KIND, META_MODE};
use crate::config::RunConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::network::Model;
use crate::reparam::{convert_model, Conversion};
use crate::training::{
    evaluate, initial_student, EpochRecord, Sink, StepRecord, TrainConfig, TrainMode, Trainer,
};

pub const MANIFEST: &str = "manifest.toml";
pub const CONFIG: &str = "config.toml";
pub const METRICS: &str = "metrics.txt";
pub const RUN_LOG: &str = "run.log";
pub const TEACHER_CKPT: &str = "teacher.ckpt";
pub const STUDENT_CKPT: &str = "student.ckpt";
pub const SLIM_CKPT: &str = "slim.ckpt";
pub const CONVERSION_REPORT: &str = "conversion_report.txt";
pub const EVAL_REPORT: &str = "eval_report.txt";

/// Metadata key under which a slim checkpoint carries its conversion report.
pub const META_REPORT: &str = "conversion_report";

/// Record of one command invocation.
#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub mode: Option<String>,
    pub seed: u64,
    pub tool_version: String,
    pub inputs: Vec<(String, String)>,
    pub outputs: Vec<String>,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub config: RunConfig,
}

impl RunManifest {
    pub fn new(command: &str, run: &RunConfig) -> Self {
        Self {
            command: command.to_string(),
            mode: None,
            seed: run.seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            started_unix: unix_now(),
            finished_unix: 0,
            config: run.clone(),
        }
    }

    pub fn input(mut self, key: &str, path: &Path) -> Self {
        self.inputs
            .push((key.to_string(), path.display().to_string()));
        self
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serialises")
    }
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// An output directory owned by one command.
pub struct RunDir {
    root: PathBuf,
    manifest: RunManifest,
}

impl RunDir {
    /// Create the directory and write the config snapshot.
    pub fn create(root: &Path, manifest: RunManifest) -> Result<Self> {
        std::fs::create_dir_all(root)?;
        std::fs::write(root.join(CONFIG), manifest.config.to_toml())?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn produced(&mut self, name: &str) {
        if !self.manifest.outputs.iter().any(|o| o == name) {
            self.manifest.outputs.push(name.to_string());
        }
    }

    fn write(&mut self, name: &str, text: &str) -> Result<()> {
        std::fs::write(self.path(name), text)?;
        self.produced(name);
        Ok(())
    }

    /// Stamp the finish time and write the manifest.
    pub fn finish(mut self) -> Result<RunManifest> {
        self.produced(CONFIG);
        self.manifest.finished_unix = unix_now();
        std::fs::write(self.path(MANIFEST), self.manifest.to_toml())?;
        Ok(self.manifest)
    }
}

/// Streams step records to the run log and epoch records to the metrics
/// file, and refreshes the checkpoint after every epoch so a diverging run
/// leaves its last good state behind.
pub struct FileSink {
    log: BufWriter<File>,
    metrics: BufWriter<File>,
    ckpt: PathBuf,
    run: RunConfig,
    kind: &'static str,
}

impl FileSink {
    fn new(dir: &mut RunDir, ckpt: &str, kind: &'static str) -> Result<Self> {
        let sink = Self {
            log: BufWriter::new(File::create(dir.path(RUN_LOG))?),
            metrics: BufWriter::new(File::create(dir.path(METRICS))?),
            ckpt: dir.path(ckpt),
            run: dir.manifest.config.clone(),
            kind,
        };
        for name in [RUN_LOG, METRICS, ckpt] {
            dir.produced(name);
        }
        Ok(sink)
    }

    fn flush(&mut self) -> Result<()> {
        self.log.flush()?;
        self.metrics.flush()?;
        Ok(())
    }

    fn save(&self, trainer: &Trainer<'_>) -> Result<()> {
        let mut ckpt = Checkpoint::from_model(&trainer.model, &self.run, self.kind, 0)
            .with_optimizer(&trainer.opt);
        if self.kind == "student" {
            ckpt.meta
                .insert(META_MODE.into(), trainer.config.mode.as_str().into());
        }
        ckpt.save(&self.ckpt)
    }
}

impl Sink for FileSink {
    fn step(&mut self, record: &StepRecord) -> Result<()> {
        writeln!(self.log, "{record}")?;
        Ok(())
    }

    fn epoch(&mut self, record: &EpochRecord, trainer: &Trainer<'_>) -> Result<()> {
        writeln!(self.metrics, "{record}")?;
        self.flush()?;
        self.save(trainer)
    }
}

/// Outcome of a training stage.
pub struct Trained {
    pub model: Model,
    pub epochs: Vec<EpochRecord>,
    pub eval: EvalReport,
}

fn write_eval(dir: &mut RunDir, report: &EvalReport) -> Result<()> {
    dir.write(EVAL_REPORT, &format!("{report}"))
}

/// Train the teacher from scratch into `dir`.
pub fn train_teacher(run: &RunConfig, dataset: &Dataset, dir: &mut RunDir) -> Result<Trained> {
    let model = Model::build(&run.model_config(false), run.seed)?;
    let cfg = TrainConfig::from_run(run, TrainMode::Teacher);
    let mut trainer = Trainer::new_teacher(cfg, dataset, run.augment.clone(), model)?;
    let mut sink = FileSink::new(dir, TEACHER_CKPT, "teacher")?;
    let epochs = run_with(&mut trainer, &mut sink)?;
    let eval = evaluate(&trainer.model, dataset)?;
    write_eval(dir, &eval)?;
    Ok(Trained {
        model: trainer.model,
        epochs,
        eval,
    })
}

/// Distill a student from `teacher` in `mode` into `dir`.
pub fn distill(
    run: &RunConfig,
    dataset: &Dataset,
    teacher: &Model,
    mode: TrainMode,
    dir: &mut RunDir,
) -> Result<Trained> {
    if mode == TrainMode::Teacher {
        return Err(Error::Config(
            "distill needs mode cdd, cdd_rggr or cdd_no_dgc".into(),
        ));
    }
    dir.manifest.mode = Some(mode.as_str().to_string());
    check_teacher(run, teacher)?;
    let student = initial_student(run, teacher, mode)?;
    let cfg = TrainConfig::from_run(run, mode);
    let mut trainer = Trainer::new_distill(cfg, dataset, run.augment.clone(), teacher, student)?;
    let mut sink = FileSink::new(dir, STUDENT_CKPT, "student")?;
    let epochs = run_with(&mut trainer, &mut sink)?;
    let eval = evaluate(&trainer.model, dataset)?;
    write_eval(dir, &eval)?;
    Ok(Trained {
        model: trainer.model,
        epochs,
        eval,
    })
}

fn run_with(trainer: &mut Trainer<'_>, sink: &mut FileSink) -> Result<Vec<EpochRecord>> {
    sink.save(trainer)?;
    let out = trainer.run(sink);
    sink.flush()?;
    out
}

/// The teacher must have exactly the topology the config describes.
pub fn check_teacher(run: &RunConfig, teacher: &Model) -> Result<()> {
    if teacher.has_compactors() {
        return Err(Error::Compat(
            "teacher checkpoint carries compactors".into(),
        ));
    }
    let want = Model::build(&run.model_config(false), 0)?;
    let have = teacher.to_named_tensors();
    let want = want.to_named_tensors();
    for ((hn, ht), (wn, wt)) in have.iter().zip(&want) {
        if hn != wn {
            return Err(Error::Compat(format!(
                "teacher layer {hn} where config expects {wn}"
            )));
        }
        if ht.shape() != wt.shape() {
            return Err(Error::Compat(format!(
                "teacher layer {hn} has shape {:?}, config expects {:?}",
                ht.shape(),
                wt.shape()
            )));
        }
    }
    if have.len() != want.len() {
        return Err(Error::Compat(format!(
            "teacher has {} tensors, config expects {}",
            have.len(),
            want.len()
        )));
    }
    Ok(())
}

/// Convert a trained student and write the slim checkpoint plus report.
pub fn convert(
    run: &RunConfig,
    student: &Model,
    lambda: f64,
    dir: &mut RunDir,
) -> Result<Conversion> {
    let conv = convert_model(student, lambda)?;
    let report = conv.report.to_string();
    let mut ckpt = Checkpoint::from_model(&conv.slim, run, "slim", 0);
    ckpt.meta.insert(META_REPORT.into(), report.clone());
    ckpt.save(&dir.path(SLIM_CKPT))?;
    dir.produced(SLIM_CKPT);
    dir.write(CONVERSION_REPORT, &report)?;
    Ok(conv)
}

/// Evaluate any model on the eval split described by `run`.
pub fn eval(run: &RunConfig, model: &Model, dir: &mut RunDir) -> Result<EvalReport> {
    let dataset = Dataset::generate(&run.data)?;
    let want = run.model_config(false).input_shape();
    let have = model.config.input_shape();
    if want != have {
        return Err(Error::Compat(format!(
            "model expects input {have:?}, dataset yields {want:?}"
        )));
    }
    let report = evaluate(model, &dataset)?;
    write_eval(dir, &report)?;
    Ok(report)
}

/// Load a checkpoint and its model, naming the file on failure.
pub fn load_model(path: &Path) -> Result<(Checkpoint, Model)> {
    let ckpt = Checkpoint::load(path)?;
    let model = ckpt.model()?;
    Ok((ckpt, model))
}

/// Kind recorded in a checkpoint, if any.
pub fn kind_of(ckpt: &Checkpoint) -> &str {
    ckpt.meta
        .get(META_KIND)
        .map(String::as_str)
        .unwrap_or("unknown")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        let mut run = RunConfig::default();
        run.data.num_identities = 8;
        run.data.images_per_identity = 6;
        run.data.height = 8;
        run.data.width = 8;
        run.model.widths = vec![4, 6];
        run.model.blocks_per_stage = vec![1, 1];
        run.model.embedding_dim = 6;
        {
            let s = &mut run.teacher;
            s.epochs = 2;
            s.batches_per_epoch = 2;
            s.warmup_epochs = 1;
            s.identities_per_batch = 2;
            s.samples_per_identity = 2;
        }
        let d = &mut run.distill;
        d.epochs = 3;
        d.batches_per_epoch = 2;
        d.warmup_epochs = 1;
        d.identities_per_batch = 2;
        d.samples_per_identity = 2;
        d.rggr_activation_epoch = 1;
        d.queue_capacity = 8;
        run
    }

    #[test]
    fn full_pipeline_writes_every_file() {
        let tmp = tempfile::tempdir().unwrap();
        let run = tiny();
        run.validate().unwrap();
        let ds = Dataset::generate(&run.data).unwrap();

        let mut d = RunDir::create(
            &tmp.path().join("t"),
            RunManifest::new("train-teacher", &run),
        )
        .unwrap();
        let t = train_teacher(&run, &ds, &mut d).unwrap();
        d.finish().unwrap();
        let (_, teacher) = load_model(&tmp.path().join("t").join(TEACHER_CKPT)).unwrap();
        assert_eq!(teacher, t.model);

        let mut d =
            RunDir::create(&tmp.path().join("s"), RunManifest::new("distill", &run)).unwrap();
        let s = distill(&run, &ds, &teacher, TrainMode::CddRggr, &mut d).unwrap();
        let m = d.finish().unwrap();
        assert_eq!(m.mode.as_deref(), Some("cdd_rggr"));
        assert_eq!(s.epochs.len(), 3);
        let log = std::fs::read_to_string(tmp.path().join("s").join(RUN_LOG)).unwrap();
        assert_eq!(log.lines().count(), 6);
        assert!(!log.lines().next().unwrap().contains("mask."));
        assert!(log.lines().nth(2).unwrap().contains("mask.0.selected="));

        let mut d =
            RunDir::create(&tmp.path().join("c"), RunManifest::new("convert", &run)).unwrap();
        let c = convert(&run, &s.model, 1e-5, &mut d).unwrap();
        d.finish().unwrap();
        let (ckpt, slim) = load_model(&tmp.path().join("c").join(SLIM_CKPT)).unwrap();
        assert_eq!(slim, c.slim);
        assert_eq!(
            ckpt.meta[META_REPORT],
            std::fs::read_to_string(tmp.path().join("c").join(CONVERSION_REPORT)).unwrap()
        );

        let mut d = RunDir::create(&tmp.path().join("e"), RunManifest::new("eval", &run)).unwrap();
        let r = eval(&run, &slim, &mut d).unwrap();
        let m = d.finish().unwrap();
        assert_eq!(m.outputs, vec![EVAL_REPORT.to_string(), CONFIG.to_string()]);
        assert!(r.params > 0);
        let text = std::fs::read_to_string(tmp.path().join("e").join(MANIFEST)).unwrap();
        assert!(text.contains("command = \"eval\""));
        assert!(text.contains("[config.distill]"));
    }

    #[test]
    fn teacher_topology_mismatch_names_layer() {
        let run = tiny();
        let mut other = run.clone();
        other.model.widths = vec![4, 8];
        let teacher = Model::build(&other.model_config(false), 0).unwrap();
        let err = check_teacher(&run, &teacher).unwrap_err().to_string();
        assert!(err.contains("blocks.1"), "{err}");
    }

    #[test]
    fn distill_rejects_teacher_mode() {
        let tmp = tempfile::tempdir().unwrap();
        let run = tiny();
        let ds = Dataset::generate(&run.data).unwrap();
        let teacher = Model::build(&run.model_config(false), 0).unwrap();
        let mut d = RunDir::create(tmp.path(), RunManifest::new("distill", &run)).unwrap();
        assert!(matches!(
            distill(&run, &ds, &teacher, TrainMode::Teacher, &mut d),
            Err(Error::Config(_))
        ));
    }
}
