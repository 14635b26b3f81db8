use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::info;
use sparsecse::checkpoint::Checkpoint;
use sparsecse::config::RunConfig;
use sparsecse::encoder::{EncoderWeights, MaskSet};
use sparsecse::io::write_atomic;
use sparsecse::pipeline::{self, Dataset};
use sparsecse::pruner::{select_prune_set, SparsitySpec};
use sparsecse::scoring::ScoreTable;
use sparsecse::sweep::{run_sweep, SweepInputs};
use sparsecse::synth;
use sparsecse::train::{config_hash, rewind_and_retrain, RewindCheckpoint};
use sparsecse::{Error, Result};

pub const PRETRAINED: &str = "pretrained.spcs";
pub const REWIND: &str = "rewind.spcs";
pub const PRETRAIN_LOG: &str = "pretrain_log.csv";
pub const TRAINED: &str = "trained.spcs";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const SCORES: &str = "scores.csv";
pub const PRUNED: &str = "pruned.spcs";
pub const DECISION: &str = "prune_decision.csv";
pub const SUMMARY: &str = "prune_summary.json";
pub const RETRAINED: &str = "retrained.spcs";
pub const RETRAIN_LOG: &str = "retrain_log.csv";
pub const EVAL: &str = "eval.json";
pub const SWEEP_DIR: &str = "sweep";

pub struct Stage {
    pub config: RunConfig,
    pub dry_run: bool,
    pub jobs: usize,
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn require(path: &Path, stage: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Dependency {
            stage: stage.to_string(),
            path: path.to_path_buf(),
        })
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())?;
    info!("wrote {}", path.display());
    Ok(())
}

impl Stage {
    fn out(&self, name: &str) -> PathBuf {
        self.config.out_dir.join(name)
    }

    /// Inputs exist and the output directory is usable. `true` when the
    /// caller should stop here.
    fn prepare(&self, deps: &[(&Path, &str)]) -> Result<bool> {
        let missing = self.config.data.missing();
        if let Some(p) = missing.first() {
            return Err(io_err(p, std::io::Error::new(std::io::ErrorKind::NotFound, "input file not found")));
        }
        for (p, stage) in deps {
            require(p, stage)?;
        }
        if self.dry_run {
            let _ = writeln!(std::io::stdout(), "{}", self.config.to_json());
            return Ok(true);
        }
        fs::create_dir_all(&self.config.out_dir).map_err(|e| io_err(&self.config.out_dir, e))?;
        Ok(false)
    }

    /// A stage artifact whose embedded model config must match ours.
    fn load(&self, path: &Path, stage: &str) -> Result<Checkpoint> {
        require(path, stage)?;
        let c = Checkpoint::load(path)?;
        if c.config.model != self.config.model {
            return Err(Error::Compatibility(format!(
                "{} was produced with a different model configuration",
                path.display()
            )));
        }
        Ok(c)
    }

    fn save(&self, name: &str, weights: &EncoderWeights<f32>, masks: &MaskSet<f32>, step: usize) -> Result<()> {
        let path = self.out(name);
        Checkpoint {
            config: self.config.clone(),
            weights: weights.clone(),
            masks: masks.clone(),
            step: step as u64,
        }
        .save(&path)?;
        info!("wrote {}", path.display());
        Ok(())
    }

    pub fn pretrain(&self) -> Result<()> {
        if self.prepare(&[])? {
            return Ok(());
        }
        let data = Dataset::load(&self.config)?;
        let out = pipeline::pretrain(&self.config, &data)?;
        let ones = MaskSet::ones_for(&out.weights);
        self.save(PRETRAINED, &out.weights, &ones, self.config.train.pretrain_steps)?;
        self.save(REWIND, &out.rewind.weights, &ones, out.rewind.step)?;
        write_text(&self.out(PRETRAIN_LOG), &out.log.to_csv())
    }

    pub fn train(&self) -> Result<()> {
        let src = self.out(PRETRAINED);
        if self.prepare(&[(&src, "pretrain")])? {
            return Ok(());
        }
        let data = Dataset::load(&self.config)?;
        let pre = self.load(&src, "pretrain")?;
        let (weights, log) = pipeline::train(&self.config, &data, pre.weights)?;
        self.save(TRAINED, &weights, &MaskSet::ones_for(&weights), self.config.train.contrastive_steps)?;
        write_text(&self.out(TRAIN_LOG), &log.to_csv())
    }

    pub fn score(&self) -> Result<()> {
        let src = self.out(TRAINED);
        if self.prepare(&[(&src, "train")])? {
            return Ok(());
        }
        let data = Dataset::load(&self.config)?;
        let trained = self.load(&src, "train")?;
        let table = pipeline::score(&self.config, &data, &trained.weights, self.config.score.lambda)?;
        write_text(&self.out(SCORES), &table.to_csv())
    }

    pub fn prune(&self) -> Result<()> {
        let (src, scores) = (self.out(TRAINED), self.out(SCORES));
        if self.prepare(&[(&src, "train"), (&scores, "score")])? {
            return Ok(());
        }
        let trained = self.load(&src, "train")?;
        let text = fs::read_to_string(&scores).map_err(|e| io_err(&scores, e))?;
        let table = ScoreTable::from_csv(&text, &scores)?;
        let decision = select_prune_set(&table, SparsitySpec::new(self.config.prune_sparsity)?)?;
        let summary = decision.summary(&trained.weights)?;
        self.save(PRUNED, &trained.weights, &decision.masks, trained.step as usize)?;
        write_text(&self.out(DECISION), &decision.to_csv(&table))?;
        let json = serde_json::to_string_pretty(&summary).map_err(|e| Error::Data(e.to_string()))?;
        write_text(&self.out(SUMMARY), &json)
    }

    pub fn rewind(&self) -> Result<()> {
        let (pruned, target) = (self.out(PRUNED), self.out(REWIND));
        if self.prepare(&[(&pruned, "prune"), (&target, "pretrain")])? {
            return Ok(());
        }
        let data = Dataset::load(&self.config)?;
        let masks = self.load(&pruned, "prune")?.masks;
        let snapshot = self.load(&target, "pretrain")?;
        let checkpoint = RewindCheckpoint {
            config_hash: config_hash(&snapshot.config.model),
            step: snapshot.step as usize,
            weights: snapshot.weights,
        };
        let (weights, log) = rewind_and_retrain(&masks, &checkpoint, &data.corpus, &self.config.model, &self.config.train)?;
        self.save(RETRAINED, &weights, &masks, self.config.train.contrastive_steps)?;
        write_text(&self.out(RETRAIN_LOG), &log.to_csv())
    }

    pub fn eval(&self, checkpoint: Option<&Path>) -> Result<()> {
        let (src, stage) = match checkpoint {
            Some(p) => (p.to_path_buf(), "input"),
            None => (self.out(RETRAINED), "rewind"),
        };
        if self.prepare(&[(&src, stage)])? {
            return Ok(());
        }
        let data = Dataset::load(&self.config)?;
        let c = self.load(&src, stage)?;
        let gates = c.masks.heads.iter().chain(&c.masks.neurons).flatten();
        let (zeros, total) = gates.fold((0usize, 0usize), |(z, t), g| (z + usize::from(*g == 0.0), t + 1));
        let name = src.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned());
        let report = pipeline::evaluate(&self.config, &data, &c.weights, &c.masks, &name, zeros as f64 / total as f64, None)?;
        let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Data(e.to_string()))?;
        write_text(&self.out(EVAL), &json)?;
        let _ = writeln!(std::io::stdout(), "{json}");
        Ok(())
    }

    pub fn sweep(&self) -> Result<()> {
        let (target, trained) = (self.out(REWIND), self.out(TRAINED));
        if self.prepare(&[(&target, "pretrain"), (&trained, "train")])? {
            return Ok(());
        }
        let data = Dataset::load(&self.config)?;
        let snapshot = self.load(&target, "pretrain")?;
        let trained = self.load(&trained, "train")?;
        let rewind = RewindCheckpoint {
            config_hash: config_hash(&snapshot.config.model),
            step: snapshot.step as usize,
            weights: snapshot.weights,
        };
        let inputs = SweepInputs {
            config: &self.config,
            data: &data,
            rewind: &rewind,
            trained: &trained.weights,
        };
        let s = &self.config.sweep;
        let report = run_sweep(&inputs, &s.sparsities, &s.lambdas, self.jobs)?;
        for p in report.write_to(&self.out(SWEEP_DIR))? {
            info!("wrote {}", p.display());
        }
        Ok(())
    }
}

pub fn gen_corpus(out: &Path, sentences: usize, seed: u64) -> Result<()> {
    let data = synth::generate(sentences, seed)?;
    data.write_to(out)?;
    info!("wrote synthetic data to {}", out.display());
    Ok(())
}
