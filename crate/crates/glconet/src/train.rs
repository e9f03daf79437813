//! Training loop (per-sample parallel gradients reduced in sample order, so
//! runs are bit-reproducible), checkpointing with optimizer state, resume,
//! and inference to 8-bit mask files.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::image;
use crate::loss::{self, LossReport};
use crate::model::GlcoNet;
use crate::optim::Adam;
use crate::params::{load_params, TensorArchive};
use crate::tensor::Tensor;

/// One loaded training sample. The boundary weight map depends only on the
/// mask, so it is computed once at load time.
#[derive(Clone)]
pub struct Sample {
    pub name: String,
    pub image: Tensor,
    pub mask: Tensor,
    pub weights: Tensor,
}

pub struct Dataset {
    pub samples: Vec<Sample>,
    pub extent: usize,
}

/// Loads img_*.ppm / gt_*.pgm pairs, sorted by name.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?
        .filter_map(|entry| {
            let name = entry.ok()?.file_name().into_string().ok()?;
            (name.starts_with("img_") && name.ends_with(".ppm")).then_some(name)
        })
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::Data(format!("no img_*.ppm files in {}", dir.display())));
    }
    let samples: Vec<Result<Sample>> = names
        .par_iter()
        .map(|name| {
            let (w, h, rgb) = image::read_ppm(&dir.join(name))?;
            let gt_name = format!("gt_{}", name.trim_start_matches("img_").trim_end_matches(".ppm"));
            let gt_path = dir.join(format!("{gt_name}.pgm"));
            let (gw, gh, gray) = image::read_pgm(&gt_path)?;
            if (gw, gh) != (w, h) {
                return Err(Error::Data(format!("{name}: image {w}x{h} but mask {gw}x{gh}")));
            }
            let mask = image::gray_to_mask(gw, gh, &gray);
            let weights = loss::weight_map(&mask)?;
            Ok(Sample { name: name.clone(), image: image::rgb_to_tensor(w, h, &rgb), mask, weights })
        })
        .collect();
    let mut out = Vec::with_capacity(names.len());
    for s in samples {
        out.push(s?);
    }
    let (_, _, h, w) = out[0].image.dims4()?;
    if h != w {
        return Err(Error::Data(format!("non-square dataset extent {h}x{w}")));
    }
    for s in &out {
        if s.image.shape()[2] != h {
            return Err(Error::Data(format!("{}: extent differs from the rest of the dataset", s.name)));
        }
    }
    Ok(Dataset { samples: out, extent: h })
}

fn mirror_horizontal(t: &Tensor) -> Tensor {
    let (b, c, h, w) = t.dims4().expect("rank 4");
    let mut out = t.clone();
    let src = t.data();
    let dst = out.data_mut();
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                let row = ((bi * c + ci) * h + y) * w;
                for x in 0..w {
                    dst[row + x] = src[row + (w - 1 - x)];
                }
            }
        }
    }
    out
}

/// Forward + backward on one sample; returns the loss report and parameter
/// gradients. Runs on a relaxed graph: non-finite values are reported, not
/// fatal.
fn sample_gradients(model: &GlcoNet, sample: &Sample) -> Result<(LossReport, Vec<(String, Tensor)>, Option<&'static str>)> {
    let mut g = Graph::relaxed();
    let x = g.leaf(sample.image.clone());
    let out = model.forward(&mut g, x)?;
    let (total, report) = loss::total_loss(&mut g, &out, &sample.mask, &sample.weights)?;
    g.backward(total)?;
    Ok((report, g.param_grads(), g.nonfinite_op()))
}

/// One optimizer step over a batch. Per-sample gradients are computed in
/// parallel and reduced in sample order; the mean gradient feeds Adam.
pub fn train_step(model: &mut GlcoNet, adam: &mut Adam, batch: &[Sample], lr: f64) -> Result<LossReport> {
    let results: Vec<Result<(LossReport, Vec<(String, Tensor)>, Option<&'static str>)>> =
        batch.par_iter().map(|s| sample_gradients(model, s)).collect();

    let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut mean = LossReport::default();
    let n = batch.len() as f64;
    for r in results {
        let (report, sample_grads, nonfinite) = r?;
        if let Some(op) = nonfinite {
            eprintln!("warning: non-finite value produced by {op} during training step");
        }
        for i in 0..5 {
            mean.bce[i] += report.bce[i] / n;
            mean.iou[i] += report.iou[i] / n;
        }
        mean.total += report.total / n;
        for (name, g) in sample_grads {
            match grads.get_mut(&name) {
                Some(acc) => acc.add_scaled(&g, 1.0),
                None => {
                    grads.insert(name, g);
                }
            }
        }
    }
    for g in grads.values_mut() {
        for v in g.data_mut() {
            *v /= n;
        }
    }
    adam.apply(lr, model, GlcoNet::visit, &grads);
    Ok(mean)
}

#[derive(Clone, Debug)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub report: LossReport,
}

pub struct Trainer {
    pub model: GlcoNet,
    pub adam: Adam,
    pub data: Dataset,
    pub cfg: RunConfig,
    pub start_epoch: usize,
}

impl Trainer {
    /// Builds model + optimizer and loads the dataset; errors surface before
    /// any training step. Resumes when the config names an existing
    /// checkpoint.
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let data = load_dataset(&cfg.data_dir)?;
        if data.extent % 32 != 0 {
            return Err(Error::Data(format!("dataset extent {} not divisible by 32", data.extent)));
        }
        if data.extent != cfg.input_size {
            return Err(Error::Data(format!(
                "dataset extent {} does not match configured input_size {}",
                data.extent, cfg.input_size
            )));
        }
        let mut model = GlcoNet::new(&cfg.model_config(), cfg.seed)?;
        let mut adam = Adam::new(cfg.adam_config());
        let mut start_epoch = 0usize;
        if let Some(path) = &cfg.checkpoint {
            if path.exists() {
                let archive = TensorArchive::load(path)?;
                restore_model(&mut model, &archive)?;
                adam.load_state(&archive)?;
                start_epoch = archive.get("meta.epoch").map(|t| t.item() as usize).unwrap_or(0);
            }
        }
        Ok(Trainer { model, adam, data, cfg: cfg.clone(), start_epoch })
    }

    fn checkpoint(&mut self) -> TensorArchive {
        let mut archive = TensorArchive::new();
        let model = &mut self.model;
        model.visit(&mut |name: &str, t: &mut Tensor| {
            archive.insert(name, t.clone());
        });
        self.adam.save_state(&mut archive);
        archive
    }

    pub fn save_checkpoint(&mut self, path: &Path, epoch: usize) -> Result<()> {
        let mut archive = self.checkpoint();
        archive.insert("meta.epoch", Tensor::scalar(epoch as f64));
        archive.save(path)
    }

    /// One pass over the dataset (deterministically shuffled per epoch).
    pub fn run_epoch(&mut self, epoch: usize) -> Result<EpochLog> {
        let lr = self.adam.lr_at(epoch);
        let n = self.data.samples.len();
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(shuffle_stream(epoch));
        order.shuffle(&mut rng);

        let mut epoch_report = LossReport::default();
        let mut steps = 0usize;
        for chunk in order.chunks(self.cfg.batch) {
            let batch: Vec<Sample> = chunk
                .iter()
                .map(|&i| {
                    let s = &self.data.samples[i];
                    if self.cfg.augment && rng.gen_bool(0.5) {
                        Sample {
                            name: s.name.clone(),
                            image: mirror_horizontal(&s.image),
                            mask: mirror_horizontal(&s.mask),
                            weights: mirror_horizontal(&s.weights),
                        }
                    } else {
                        s.clone()
                    }
                })
                .collect();
            let report = train_step(&mut self.model, &mut self.adam, &batch, lr)?;
            for i in 0..5 {
                epoch_report.bce[i] += report.bce[i];
                epoch_report.iou[i] += report.iou[i];
            }
            epoch_report.total += report.total;
            steps += 1;
        }
        let s = steps as f64;
        for i in 0..5 {
            epoch_report.bce[i] /= s;
            epoch_report.iou[i] /= s;
        }
        epoch_report.total /= s;
        Ok(EpochLog { epoch, lr, report: epoch_report })
    }

    /// Full run: per-epoch CSV log + checkpoints, final checkpoint at the
    /// end. Returns the per-epoch logs.
    pub fn train_all(&mut self) -> Result<Vec<EpochLog>> {
        let out_dir = self.cfg.out_dir.clone();
        std::fs::create_dir_all(&out_dir)?;
        let log_path = out_dir.join("train_log.csv");
        let mut log_file = if self.start_epoch > 0 && log_path.exists() {
            std::fs::OpenOptions::new().append(true).open(&log_path)?
        } else {
            let mut f = std::fs::File::create(&log_path)?;
            writeln!(f, "epoch,lr,total,bce2,bce3,bce4,bce5,bce6,iou2,iou3,iou4,iou5,iou6")?;
            f
        };
        let mut logs = Vec::new();
        for epoch in self.start_epoch..self.cfg.epochs {
            let log = self.run_epoch(epoch)?;
            let r = &log.report;
            writeln!(
                log_file,
                "{},{:.12e},{:.12e},{}",
                epoch + 1,
                log.lr,
                r.total,
                (0..5)
                    .map(|i| format!("{:.12e}", r.bce[i]))
                    .chain((0..5).map(|i| format!("{:.12e}", r.iou[i])))
                    .collect::<Vec<_>>()
                    .join(",")
            )?;
            self.save_checkpoint(&out_dir.join(format!("ckpt_ep{:04}.tnsa", epoch + 1)), epoch + 1)?;
            logs.push(log);
        }
        self.save_checkpoint(&out_dir.join("ckpt_final.tnsa"), self.cfg.epochs)?;
        Ok(logs)
    }
}

/// Epoch-dependent RNG stream for shuffling and flip decisions; offset away
/// from the per-image synth streams.
fn shuffle_stream(epoch: usize) -> u64 {
    0x5115_0000u64 + epoch as u64
}

/// Loads model parameters from a checkpoint archive, rejecting shape or
/// name mismatches with the full offender list. Optimizer / meta entries
/// are ignored here.
pub fn restore_model(model: &mut GlcoNet, archive: &TensorArchive) -> Result<()> {
    let unused = load_params(model, archive, GlcoNet::visit)?;
    let stray: Vec<String> = unused
        .into_iter()
        .filter(|n| !n.starts_with("optim.") && !n.starts_with("meta."))
        .collect();
    if !stray.is_empty() {
        return Err(Error::Data(format!(
            "checkpoint carries tensors unknown to this architecture:\n  {}",
            stray.join("\n  ")
        )));
    }
    Ok(())
}

/// Builds the configured model and restores it from `checkpoint`.
pub fn load_model(cfg: &RunConfig, checkpoint: &Path) -> Result<GlcoNet> {
    let mut model = GlcoNet::new(&cfg.model_config(), cfg.seed)?;
    let archive = TensorArchive::load(checkpoint)?;
    restore_model(&mut model, &archive)?;
    Ok(model)
}

/// Runs inference on one PPM image and writes the mask (and optional
/// per-level sigmoid dumps) into `out_dir`. Returns the mask path.
pub fn infer_one(model: &GlcoNet, image_path: &Path, out_dir: &Path, dump_levels: bool) -> Result<PathBuf> {
    let (w, h, rgb) = image::read_ppm(image_path)?;
    if w % 32 != 0 || h % 32 != 0 {
        return Err(Error::Config(format!("{}: extent {w}x{h} not divisible by 32", image_path.display())));
    }
    let input = image::rgb_to_tensor(w, h, &rgb);
    std::fs::create_dir_all(out_dir)?;
    let stem = image_path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Data(format!("bad image path {}", image_path.display())))?;
    let out_path = out_dir.join(format!("{stem}.pgm"));
    if dump_levels {
        let (levels, pred) = model.predict_levels(&input)?;
        for (i, logits) in levels.iter().enumerate() {
            let (_, _, lh, lw) = logits.dims4()?;
            let probs = logits.map(crate::kernels::sigmoid);
            let bytes = image::map_to_bytes(probs.data());
            image::write_pgm(&out_dir.join(format!("{stem}_d{}.pgm", i + 2)), lw, lh, &bytes)?;
        }
        image::write_pgm(&out_path, w, h, &image::map_to_bytes(pred.data()))?;
    } else {
        let pred = model.predict(&input)?;
        image::write_pgm(&out_path, w, h, &image::map_to_bytes(pred.data()))?;
    }
    Ok(out_path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, ObjectFamily, SynthSpec};

    fn tiny_cfg(data_dir: &Path, out_dir: &Path) -> RunConfig {
        RunConfig {
            channels: 8,
            scale_set: vec![3],
            encoder_widths: [4, 4, 6, 6, 8],
            input_size: 64,
            batch: 2,
            epochs: 2,
            count: 2,
            extent: 64,
            seed: 7,
            data_dir: data_dir.to_path_buf(),
            out_dir: out_dir.to_path_buf(),
            ..RunConfig::default()
        }
    }

    fn synth_into(cfg: &RunConfig) {
        generate(
            &SynthSpec {
                seed: cfg.seed,
                count: cfg.count,
                extent: cfg.extent,
                family: ObjectFamily::Blob,
                strength: 0.2,
                occlusion: 0.0,
            },
            &cfg.data_dir,
        )
        .unwrap();
    }

    #[test]
    fn train_writes_logs_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(&dir.path().join("data"), &dir.path().join("out"));
        synth_into(&cfg);
        let mut trainer = Trainer::new(&cfg).unwrap();
        let logs = trainer.train_all().unwrap();
        assert_eq!(logs.len(), 2);
        assert!(logs.iter().all(|l| l.report.total.is_finite()));
        let log_text = std::fs::read_to_string(cfg.out_dir.join("train_log.csv")).unwrap();
        assert!(log_text.starts_with("epoch,lr,total,bce2"));
        assert_eq!(log_text.lines().count(), 3);
        assert!(cfg.out_dir.join("ckpt_ep0001.tnsa").exists());
        assert!(cfg.out_dir.join("ckpt_final.tnsa").exists());
    }

    #[test]
    fn resume_reproduces_uninterrupted_run_bit_for_bit() {
        let dir = tempfile::tempdir().unwrap();
        // Straight two-epoch run.
        let cfg_a = tiny_cfg(&dir.path().join("data"), &dir.path().join("out_a"));
        synth_into(&cfg_a);
        Trainer::new(&cfg_a).unwrap().train_all().unwrap();

        // One epoch, then resume for the second.
        let mut cfg_b = tiny_cfg(&dir.path().join("data"), &dir.path().join("out_b"));
        cfg_b.epochs = 1;
        Trainer::new(&cfg_b).unwrap().train_all().unwrap();
        let mut cfg_b2 = tiny_cfg(&dir.path().join("data"), &dir.path().join("out_b"));
        cfg_b2.checkpoint = Some(dir.path().join("out_b").join("ckpt_ep0001.tnsa"));
        let mut resumed = Trainer::new(&cfg_b2).unwrap();
        assert_eq!(resumed.start_epoch, 1);
        resumed.train_all().unwrap();

        let a = std::fs::read(dir.path().join("out_a").join("ckpt_ep0002.tnsa")).unwrap();
        let b = std::fs::read(dir.path().join("out_b").join("ckpt_ep0002.tnsa")).unwrap();
        assert_eq!(a, b, "resumed checkpoint differs");
    }

    #[test]
    fn lr_column_follows_schedule() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg(&dir.path().join("data"), &dir.path().join("out"));
        cfg.decay_every = 2;
        cfg.epochs = 3;
        synth_into(&cfg);
        let mut trainer = Trainer::new(&cfg).unwrap();
        let logs = trainer.train_all().unwrap();
        assert!((logs[0].lr - 1e-4).abs() < 1e-18);
        assert!((logs[1].lr - 1e-4).abs() < 1e-18);
        assert!((logs[2].lr - 1e-5).abs() < 1e-19);
    }

    #[test]
    fn mismatched_checkpoint_lists_offenders() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(&dir.path().join("data"), &dir.path().join("out"));
        synth_into(&cfg);
        let mut trainer = Trainer::new(&cfg).unwrap();
        trainer.train_all().unwrap();
        // Different architecture (wider) cannot load this checkpoint.
        let mut wide = cfg.clone();
        wide.channels = 16;
        let err = load_model(&wide, &cfg.out_dir.join("ckpt_final.tnsa")).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("shape:"), "{msg}");
        assert!(msg.contains("cos.s2"), "{msg}");
    }

    #[test]
    fn zero_checkpoint_infers_uniform_half_mask() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(&dir.path().join("data"), &dir.path().join("out"));
        synth_into(&cfg);
        let mut model = GlcoNet::new(&cfg.model_config(), 1).unwrap();
        model.zero_params();
        let img = cfg.data_dir.join("img_0000.ppm");
        let out = infer_one(&model, &img, &cfg.out_dir, false).unwrap();
        let (w, h, bytes) = image::read_pgm(&out).unwrap();
        assert_eq!((w, h), (64, 64));
        assert!(bytes.iter().all(|&b| b == 128), "0.5 quantizes to 128 (round half away from zero)");
    }

    #[test]
    fn inference_is_byte_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(&dir.path().join("data"), &dir.path().join("out"));
        synth_into(&cfg);
        let model = GlcoNet::new(&cfg.model_config(), 3).unwrap();
        let img = cfg.data_dir.join("img_0001.ppm");
        let p1 = infer_one(&model, &img, &dir.path().join("o1"), false).unwrap();
        let p2 = infer_one(&model, &img, &dir.path().join("o2"), false).unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }

    #[test]
    fn dump_levels_writes_five_extra_maps() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(&dir.path().join("data"), &dir.path().join("out"));
        synth_into(&cfg);
        let model = GlcoNet::new(&cfg.model_config(), 3).unwrap();
        let img = cfg.data_dir.join("img_0000.ppm");
        infer_one(&model, &img, &cfg.out_dir, true).unwrap();
        for lvl in 2..=6 {
            assert!(cfg.out_dir.join(format!("img_0000_d{lvl}.pgm")).exists());
        }
        let (w, h, _) = image::read_pgm(&cfg.out_dir.join("img_0000_d2.pgm")).unwrap();
        assert_eq!((w, h), (16, 16));
    }
}
