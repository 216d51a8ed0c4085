//! Two-stage training: contrastive pretraining with cluster-agnostic pairs,
//! then joint optimization where a fuzzy clustering of the pooled embeddings
//! is refreshed once per epoch and steers positive selection, hard-negative
//! mixing, and the clustering loss term.

mod optim;

pub use optim::AdamW;

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::{make_views, sample_crop_boundaries, CropTriplet};
use crate::autodiff::{Elem, Graph, Var};
use crate::contrast::{
    self, instance_contrastive_loss, time_contrastive_loss, total_contrastive_loss, Pairing,
    PositiveSets, ViewReps,
};
use crate::data::Dataset;
use crate::encoder::{pool_instance, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::eval::hard_assign;
use crate::fuzzy::{
    batch_positive_sets, compute_cluster_aware_sets, fcm_fit, fcm_fit_warm, ClusterAwareSets,
    MembershipMatrix,
};

/// How often crop boundaries are redrawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CropResample {
    Batch,
    Epoch,
}

/// Ablation variants: the full model and the four mechanism removals.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Full,
    /// Context-only two-view augmentation, no perturbed view.
    NoThreeView,
    /// Drop the mixed hard negatives from both losses.
    NoHardNegatives,
    /// Singleton positives in the loss while keeping cluster-aware mixing.
    NoClusterPairs,
    /// Aware sets replaced by plain argmax classes, thresholds ignored.
    NoClusterAwareness,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoThreeView,
        Variant::NoHardNegatives,
        Variant::NoClusterPairs,
        Variant::NoClusterAwareness,
    ];

    fn tag(self) -> u8 {
        match self {
            Variant::Full => 0,
            Variant::NoThreeView => 1,
            Variant::NoHardNegatives => 2,
            Variant::NoClusterPairs => 3,
            Variant::NoClusterAwareness => 4,
        }
    }

    fn from_tag(t: u8) -> Result<Self> {
        Ok(match t {
            0 => Variant::Full,
            1 => Variant::NoThreeView,
            2 => Variant::NoHardNegatives,
            3 => Variant::NoClusterPairs,
            4 => Variant::NoClusterAwareness,
            other => return Err(Error::Checkpoint(format!("bad variant tag {other}"))),
        })
    }

    fn pairing(self) -> Pairing {
        if self == Variant::NoThreeView {
            Pairing::TwoView
        } else {
            Pairing::ThreeView
        }
    }

    fn hard_negatives(self) -> bool {
        self != Variant::NoHardNegatives
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Variant::Full => "full",
            Variant::NoThreeView => "no_three_view",
            Variant::NoHardNegatives => "no_hard_negatives",
            Variant::NoClusterPairs => "no_cluster_pairs",
            Variant::NoClusterAwareness => "no_cluster_awareness",
        };
        f.write_str(s)
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "full" => Variant::Full,
            "no_three_view" => Variant::NoThreeView,
            "no_hard_negatives" => Variant::NoHardNegatives,
            "no_cluster_pairs" => Variant::NoClusterPairs,
            "no_cluster_awareness" => Variant::NoClusterAwareness,
            other => return Err(Error::UnknownVariant(other.to_string())),
        })
    }
}

/// All hyperparameters of a run. Defaults follow the reported settings:
/// `alpha = 0.2`, `r = 0.5`, `theta = 0.95`, lambda caps `0.2`, `m = 1.5`,
/// 100+100 epochs. Batch size defaults to `min(16, N)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub alpha: f64,
    pub r: f64,
    pub theta: f64,
    pub lambda1_max: f64,
    pub lambda2_max: f64,
    pub m: f64,
    pub epochs_pretrain: usize,
    pub epochs_joint: usize,
    pub batch_size: Option<usize>,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub seed: u64,
    pub sigma_perturb: f64,
    pub crop_resample: CropResample,
    /// Weight the clustering loss by `p^m` instead of `p`.
    pub cluster_loss_pm: bool,
    pub hidden_dims: usize,
    pub output_dims: usize,
    pub fcm_tol: f64,
    pub fcm_max_iter: usize,
    /// Epochs between metric evaluations (0 disables per-epoch metrics).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.2,
            r: 0.5,
            theta: 0.95,
            lambda1_max: 0.2,
            lambda2_max: 0.2,
            m: 1.5,
            epochs_pretrain: 100,
            epochs_joint: 100,
            batch_size: None,
            learning_rate: 1e-3,
            weight_decay: 0.01,
            dropout: 0.0,
            seed: 0,
            sigma_perturb: 0.1,
            crop_resample: CropResample::Batch,
            cluster_loss_pm: false,
            hidden_dims: 64,
            output_dims: 320,
            fcm_tol: 1e-4,
            fcm_max_iter: 100,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 {
            return Err(Error::Config("alpha must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.r) {
            return Err(Error::Config("r must be in [0,1]".into()));
        }
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(Error::Config("theta must be in [0,1]".into()));
        }
        for (name, v) in [("lambda1_max", self.lambda1_max), ("lambda2_max", self.lambda2_max)] {
            if !(v > 0.0 && v <= 0.5) {
                return Err(Error::Config(format!("{name} must lie in (0, 0.5]")));
            }
        }
        if self.m <= 1.0 {
            return Err(Error::Config("m must be > 1".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must be in [0,1)".into()));
        }
        if self.sigma_perturb < 0.0 {
            return Err(Error::Config("sigma must be >= 0".into()));
        }
        if let Some(b) = self.batch_size {
            if b < 2 {
                return Err(Error::Config("batch size must be at least 2".into()));
            }
        }
        Ok(())
    }

    pub fn resolved_batch_size(&self, n: usize) -> usize {
        self.batch_size.unwrap_or_else(|| n.min(16)).min(n)
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            hidden_dims: self.hidden_dims,
            output_dims: self.output_dims,
            ..EncoderConfig::default()
        }
    }

    /// Flat `key=value` text, one pair per line. The audit trail written next
    /// to every run and the format read back by `--config`.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            s.push_str(k);
            s.push('=');
            s.push_str(&v);
            s.push('\n');
        };
        put("alpha", self.alpha.to_string());
        put("r", self.r.to_string());
        put("theta", self.theta.to_string());
        put("lambda1_max", self.lambda1_max.to_string());
        put("lambda2_max", self.lambda2_max.to_string());
        put("m", self.m.to_string());
        put("epochs_pretrain", self.epochs_pretrain.to_string());
        put("epochs_joint", self.epochs_joint.to_string());
        put(
            "batch_size",
            self.batch_size.map_or("auto".into(), |b| b.to_string()),
        );
        put("learning_rate", self.learning_rate.to_string());
        put("weight_decay", self.weight_decay.to_string());
        put("dropout", self.dropout.to_string());
        put("seed", self.seed.to_string());
        put("sigma_perturb", self.sigma_perturb.to_string());
        put(
            "crop_resample",
            match self.crop_resample {
                CropResample::Batch => "batch".into(),
                CropResample::Epoch => "epoch".into(),
            },
        );
        put("cluster_loss_pm", self.cluster_loss_pm.to_string());
        put("hidden_dims", self.hidden_dims.to_string());
        put("output_dims", self.output_dims.to_string());
        put("fcm_tol", self.fcm_tol.to_string());
        put("fcm_max_iter", self.fcm_max_iter.to_string());
        put("eval_every", self.eval_every.to_string());
        s
    }

    pub fn set_kv(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |k: &str, v: &str| Error::Config(format!("bad value {v:?} for key {k:?}"));
        match key {
            "alpha" => self.alpha = value.parse().map_err(|_| bad(key, value))?,
            "r" => self.r = value.parse().map_err(|_| bad(key, value))?,
            "theta" => self.theta = value.parse().map_err(|_| bad(key, value))?,
            "lambda1_max" => self.lambda1_max = value.parse().map_err(|_| bad(key, value))?,
            "lambda2_max" => self.lambda2_max = value.parse().map_err(|_| bad(key, value))?,
            "m" => self.m = value.parse().map_err(|_| bad(key, value))?,
            "epochs_pretrain" => {
                self.epochs_pretrain = value.parse().map_err(|_| bad(key, value))?
            }
            "epochs_joint" => self.epochs_joint = value.parse().map_err(|_| bad(key, value))?,
            "batch_size" => {
                self.batch_size = if value == "auto" {
                    None
                } else {
                    Some(value.parse().map_err(|_| bad(key, value))?)
                }
            }
            "learning_rate" => self.learning_rate = value.parse().map_err(|_| bad(key, value))?,
            "weight_decay" => self.weight_decay = value.parse().map_err(|_| bad(key, value))?,
            "dropout" => self.dropout = value.parse().map_err(|_| bad(key, value))?,
            "seed" => self.seed = value.parse().map_err(|_| bad(key, value))?,
            "sigma_perturb" => self.sigma_perturb = value.parse().map_err(|_| bad(key, value))?,
            "crop_resample" => {
                self.crop_resample = match value {
                    "batch" => CropResample::Batch,
                    "epoch" => CropResample::Epoch,
                    _ => return Err(bad(key, value)),
                }
            }
            "cluster_loss_pm" => {
                self.cluster_loss_pm = value.parse().map_err(|_| bad(key, value))?
            }
            "hidden_dims" => self.hidden_dims = value.parse().map_err(|_| bad(key, value))?,
            "output_dims" => self.output_dims = value.parse().map_err(|_| bad(key, value))?,
            "fcm_tol" => self.fcm_tol = value.parse().map_err(|_| bad(key, value))?,
            "fcm_max_iter" => self.fcm_max_iter = value.parse().map_err(|_| bad(key, value))?,
            "eval_every" => self.eval_every = value.parse().map_err(|_| bad(key, value))?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", lineno + 1)))?;
            cfg.set_kv(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }
}

/// `L = L_contrast + alpha * L_cluster`.
pub fn total_loss(contrastive: f64, cluster: f64, alpha: f64) -> f64 {
    contrastive + alpha * cluster
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    Joint,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Pretrain => "pretrain",
            Stage::Joint => "joint",
        })
    }
}

/// One history row per epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: Stage,
    pub contrast_loss: f64,
    pub cluster_loss: f64,
    pub total_loss: f64,
    pub nmi: f64,
    pub ri: f64,
    pub aware_count: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from(
            "epoch,stage,contrast_loss,cluster_loss,total_loss,nmi,ri,aware_count\n",
        );
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.epoch, r.stage, r.contrast_loss, r.cluster_loss, r.total_loss, r.nmi, r.ri,
                r.aware_count
            ));
        }
        fs::File::create(path)
            .and_then(|mut f| f.write_all(out.as_bytes()))
            .map_err(|source| Error::Io {
                path: path.to_path_buf(),
                source,
            })
    }

    pub fn last_nmi(&self) -> Option<f64> {
        self.records.iter().rev().map(|r| r.nmi).find(|v| !v.is_nan())
    }
}

// rng stream labels
const STREAM_SHUFFLE: u64 = 0x5348_5546;
const STREAM_CROP: u64 = 0x4352_4f50;
const STREAM_PERTURB: u64 = 0x5045_5254;
const STREAM_MIX: u64 = 0x4d49_5850;
const STREAM_DROPOUT: u64 = 0x4452_4f50;
const FCM_SEED_SALT: u64 = 0x4643_4d53;

struct RngSet {
    shuffle: ChaCha8Rng,
    crop: ChaCha8Rng,
    perturb: ChaCha8Rng,
    mix: ChaCha8Rng,
    dropout: ChaCha8Rng,
}

impl RngSet {
    fn new(seed: u64) -> Self {
        let mk = |salt: u64| ChaCha8Rng::seed_from_u64(seed ^ salt);
        RngSet {
            shuffle: mk(STREAM_SHUFFLE),
            crop: mk(STREAM_CROP),
            perturb: mk(STREAM_PERTURB),
            mix: mk(STREAM_MIX),
            dropout: mk(STREAM_DROPOUT),
        }
    }

    fn all_mut(&mut self) -> [&mut ChaCha8Rng; 5] {
        [
            &mut self.shuffle,
            &mut self.crop,
            &mut self.perturb,
            &mut self.mix,
            &mut self.dropout,
        ]
    }
}

struct EpochGuidance {
    p: Array2<f64>,
    centers: Array2<f64>,
    sets: ClusterAwareSets,
}

struct StepStats {
    contrast: f64,
    cluster: f64,
}

/// Owns the encoder, optimizer state, and rng streams for one run. The full
/// schedule is `epochs_pretrain` pretraining epochs followed by
/// `epochs_joint` joint epochs; [`Trainer::run_epoch`] advances one epoch and
/// the whole state snapshots to a checkpoint for bit-exact resume.
pub struct Trainer<E: Elem> {
    cfg: TrainConfig,
    variant: Variant,
    data: Dataset,
    encoder: Encoder<E>,
    opt: AdamW<E>,
    rngs: RngSet,
    centers: Option<Array2<f64>>,
    epoch: usize,
    history: TrainHistory,
}

impl<E: Elem> Trainer<E> {
    pub fn new(data: &Dataset, cfg: &TrainConfig, variant: Variant) -> Result<Self> {
        let encoder = Encoder::init(cfg.encoder_config(), cfg.seed)?;
        Self::with_encoder(encoder, data, cfg, variant)
    }

    /// Start from an existing encoder (the joint-only and pretrain-only
    /// entry points use this).
    pub fn with_encoder(
        encoder: Encoder<E>,
        data: &Dataset,
        cfg: &TrainConfig,
        variant: Variant,
    ) -> Result<Self> {
        cfg.validate()?;
        if data.n() < 2 {
            return Err(Error::BatchTooSmall(data.n()));
        }
        if data.n_classes < 2 {
            return Err(Error::Config(
                "dataset needs n_classes >= 2 for clustering".into(),
            ));
        }
        if data.t() < 4 {
            return Err(Error::SeriesTooShort {
                t: data.t(),
                min_overlap: 2,
            });
        }
        let opt = AdamW::new(cfg.learning_rate, cfg.weight_decay, encoder.params());
        Ok(Trainer {
            cfg: cfg.clone(),
            variant,
            data: data.clone(),
            encoder,
            opt,
            rngs: RngSet::new(cfg.seed),
            centers: None,
            epoch: 0,
            history: TrainHistory::default(),
        })
    }

    pub fn encoder(&self) -> &Encoder<E> {
        &self.encoder
    }

    pub fn history(&self) -> &TrainHistory {
        &self.history
    }

    pub fn epochs_total(&self) -> usize {
        self.cfg.epochs_pretrain + self.cfg.epochs_joint
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    fn stage(&self) -> Stage {
        if self.epoch < self.cfg.epochs_pretrain {
            Stage::Pretrain
        } else {
            Stage::Joint
        }
    }

    /// Pooled per-instance embeddings of the whole dataset (inference mode),
    /// in f64 for the clustering side.
    pub fn pooled_embeddings(&self) -> Result<Array2<f64>> {
        pooled_embeddings(&self.encoder, &self.data.values)
    }

    fn fcm_seed(&self) -> u64 {
        self.cfg.seed ^ FCM_SEED_SALT
    }

    /// Cluster the current representation space. Warm-starts from the stored
    /// centers; cold k-means++ seeding happens only when none exist.
    fn cluster_now(&self, z: &Array2<f64>) -> Result<MembershipMatrix> {
        let k = self.data.n_classes;
        match &self.centers {
            Some(c) => fcm_fit_warm(z, c.clone(), self.cfg.m, self.cfg.fcm_tol, self.cfg.fcm_max_iter),
            None => fcm_fit(z, k, self.cfg.m, self.cfg.fcm_tol, self.cfg.fcm_max_iter, self.fcm_seed()),
        }
    }

    fn make_guidance(&mut self) -> Result<EpochGuidance> {
        let z = self.pooled_embeddings()?;
        let mm = self.cluster_now(&z)?;
        let sets = if self.variant == Variant::NoClusterAwareness {
            ClusterAwareSets::from_argmax(&mm.p)
        } else {
            compute_cluster_aware_sets(&mm.p, self.cfg.r, self.cfg.theta)
        };
        self.centers = Some(mm.centers.clone());
        Ok(EpochGuidance {
            p: mm.p,
            centers: mm.centers,
            sets,
        })
    }

    fn batch_rows(&self, idx: &[usize]) -> Array2<f64> {
        let t = self.data.t();
        let mut out = Array2::<f64>::zeros((idx.len(), t));
        for (bi, &i) in idx.iter().enumerate() {
            out.row_mut(bi).assign(&self.data.values.row(i));
        }
        out
    }

    fn step(
        &mut self,
        batch: &[usize],
        guidance: Option<&EpochGuidance>,
        epoch_crop: Option<CropTriplet>,
    ) -> Result<StepStats> {
        let b = batch.len();
        let t = self.data.t();
        let crop = match epoch_crop {
            Some(c) => c,
            // overlap of at least 2 so a partner timestamp always exists
            None => sample_crop_boundaries(t, 2, &mut self.rngs.crop)?,
        };
        let rows = self.batch_rows(batch);
        let views = make_views(&rows, crop, self.cfg.sigma_perturb, &mut self.rngs.perturb)?;
        let w = views.overlap.len;
        let pairing = self.variant.pairing();

        let mut g = Graph::<E>::new();
        let vars = self.encoder.bind(&mut g);
        let dropout_p = self.cfg.dropout;

        let za = if pairing == Pairing::ThreeView {
            Some(encode_view(
                &self.encoder,
                &mut g,
                &vars,
                &views.xa,
                dropout_p,
                &mut self.rngs.dropout,
            )?)
        } else {
            None
        };
        let zb = encode_view(
            &self.encoder,
            &mut g,
            &vars,
            &views.xb,
            dropout_p,
            &mut self.rngs.dropout,
        )?;
        let zc = encode_view(
            &self.encoder,
            &mut g,
            &vars,
            &views.xc,
            dropout_p,
            &mut self.rngs.dropout,
        )?;

        let slice_to = |g: &mut Graph<E>, v: Var, start: usize| -> Var {
            if start == 0 && g.value(v).shape()[1] == w {
                v
            } else {
                g.slice_axis1(v, start, w)
            }
        };
        let z_omega = ViewReps {
            a: za.map(|v| slice_to(&mut g, v, views.overlap.in_a)),
            b: slice_to(&mut g, zb, views.overlap.in_b),
            c: slice_to(&mut g, zc, views.overlap.in_c),
        };

        // positive sets: the loss side and the mixing side can differ
        let singles = PositiveSets::singletons(b);
        let aware_pos = guidance.map(|gd| batch_positive_sets(&gd.sets, batch));
        let loss_pos = match (&aware_pos, self.variant) {
            (Some(p), Variant::Full)
            | (Some(p), Variant::NoThreeView)
            | (Some(p), Variant::NoHardNegatives)
            | (Some(p), Variant::NoClusterAwareness) => p.clone(),
            _ => singles.clone(),
        };
        let hn_pos = aware_pos.unwrap_or_else(|| singles.clone());

        let (time_hn, inst_hn) = if self.variant.hard_negatives() {
            let (th, _) = contrast::gen_time_hard_negatives(
                &mut g,
                &z_omega,
                w,
                b,
                self.cfg.lambda1_max,
                &mut self.rngs.mix,
            )?;
            let (ih, _) = contrast::gen_instance_hard_negatives(
                &mut g,
                &z_omega,
                &hn_pos,
                w,
                self.cfg.lambda2_max,
                &mut self.rngs.mix,
            )?;
            (Some(th), Some(ih))
        } else {
            (None, None)
        };

        let tloss = time_contrastive_loss(&mut g, &z_omega, time_hn.as_ref(), pairing);
        let iloss = instance_contrastive_loss(&mut g, &z_omega, inst_hn.as_ref(), &loss_pos, pairing);
        let contrast_v = total_contrastive_loss(&mut g, tloss, iloss);

        let (root, cluster_value) = match guidance {
            Some(gd) if self.cfg.alpha > 0.0 => {
                // differentiable cluster term on the full (uncropped) series
                let zfull = encode_view(
                    &self.encoder,
                    &mut g,
                    &vars,
                    &rows,
                    dropout_p,
                    &mut self.rngs.dropout,
                )?;
                let pooled = g.max_axis1(zfull);
                let mut p_batch = Array2::<E>::zeros((b, gd.p.ncols()));
                for (bi, &i) in batch.iter().enumerate() {
                    for j in 0..gd.p.ncols() {
                        let w = if self.cfg.cluster_loss_pm {
                            gd.p[[i, j]].powf(self.cfg.m)
                        } else {
                            gd.p[[i, j]]
                        };
                        p_batch[[bi, j]] = E::from_f64(w);
                    }
                }
                let mu = gd.centers.mapv(E::from_f64);
                let sq = g.cluster_sqdist(pooled, p_batch, mu);
                let cluster_norm = g.scale(sq, 1.0 / b as f64);
                let cluster_value = g.scalar(cluster_norm).to_f64();
                let weighted = g.scale(cluster_norm, self.cfg.alpha);
                (g.addn(&[contrast_v, weighted]), cluster_value)
            }
            _ => (contrast_v, f64::NAN),
        };

        let grads = g.backward(root);
        let grad_arrays: Vec<ArrayD<E>> = vars
            .vars
            .iter()
            .zip(self.encoder.params())
            .map(|(v, p)| grads.get_or_zeros(*v, p.value.shape()))
            .collect();
        self.opt.step(self.encoder.params_mut(), &grad_arrays);

        Ok(StepStats {
            contrast: g.scalar(contrast_v).to_f64(),
            cluster: cluster_value,
        })
    }

    /// Metrics snapshot of the current encoder (observational; does not touch
    /// the warm-start centers or any rng stream).
    fn evaluate_now(&self) -> Result<(f64, f64, MembershipMatrix)> {
        let z = self.pooled_embeddings()?;
        let mm = self.cluster_now(&z)?;
        let (nmi_v, ri_v) = match &self.data.labels {
            Some(labels) => {
                let preds = hard_assign(&mm.p);
                (
                    crate::eval::nmi(labels, &preds)?,
                    crate::eval::rand_index(labels, &preds)?,
                )
            }
            None => (f64::NAN, f64::NAN),
        };
        Ok((nmi_v, ri_v, mm))
    }

    /// Run one epoch of the schedule.
    pub fn run_epoch(&mut self) -> Result<()> {
        assert!(self.epoch < self.epochs_total(), "schedule exhausted");
        let stage = self.stage();
        let n = self.data.n();
        let bsize = self.cfg.resolved_batch_size(n);

        let guidance = if stage == Stage::Joint {
            Some(self.make_guidance()?)
        } else {
            None
        };
        let aware_count = guidance.as_ref().map_or(0, |gd| gd.sets.total_selected());

        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.rngs.shuffle);
        let epoch_crop = if self.cfg.crop_resample == CropResample::Epoch {
            Some(sample_crop_boundaries(self.data.t(), 2, &mut self.rngs.crop)?)
        } else {
            None
        };

        let mut sum_contrast = 0.0;
        let mut sum_cluster = 0.0;
        let mut n_steps = 0usize;
        let mut n_cluster = 0usize;
        for chunk in order.chunks(bsize) {
            if chunk.len() < 2 {
                continue; // a singleton batch has no negatives
            }
            let stats = self.step(chunk, guidance.as_ref(), epoch_crop)?;
            sum_contrast += stats.contrast;
            if !stats.cluster.is_nan() {
                sum_cluster += stats.cluster;
                n_cluster += 1;
            }
            n_steps += 1;
        }

        self.epoch += 1;
        let contrast_loss = sum_contrast / n_steps.max(1) as f64;
        let cluster_loss = if n_cluster > 0 {
            sum_cluster / n_cluster as f64
        } else {
            f64::NAN
        };
        let total = if cluster_loss.is_nan() {
            contrast_loss
        } else {
            total_loss(contrast_loss, cluster_loss, self.cfg.alpha)
        };

        let should_eval = self.data.labels.is_some()
            && self.cfg.eval_every > 0
            && (self.epoch % self.cfg.eval_every == 0 || self.epoch == self.epochs_total());
        let (nmi_v, ri_v) = if should_eval {
            let (a, b, _) = self.evaluate_now()?;
            (a, b)
        } else {
            (f64::NAN, f64::NAN)
        };

        self.history.records.push(EpochRecord {
            epoch: self.epoch,
            stage,
            contrast_loss,
            cluster_loss,
            total_loss: total,
            nmi: nmi_v,
            ri: ri_v,
            aware_count,
        });
        Ok(())
    }

    /// Run the remaining schedule to completion and produce the final
    /// clustering of the learned space.
    pub fn run(&mut self) -> Result<MembershipMatrix> {
        while self.epoch < self.epochs_total() {
            self.run_epoch()?;
        }
        self.final_clustering()
    }

    /// Cluster the current representation space without training further.
    pub fn final_clustering(&self) -> Result<MembershipMatrix> {
        let z = self.pooled_embeddings()?;
        self.cluster_now(&z)
    }

    // ---- checkpointing ------------------------------------------------

    const TRAINER_TAG: [u8; 4] = *b"TRST";

    pub fn save_state(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(&(self.epoch as u64).to_le_bytes());
        buf.push(self.variant.tag());
        match &self.centers {
            Some(c) => {
                buf.push(1);
                buf.extend_from_slice(&(c.nrows() as u64).to_le_bytes());
                buf.extend_from_slice(&(c.ncols() as u64).to_le_bytes());
                for &v in c.iter() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
            None => buf.push(0),
        }
        buf.extend_from_slice(&self.opt.t.to_le_bytes());
        for arr in self.opt.m.iter().chain(self.opt.v.iter()) {
            for &v in arr.iter() {
                E::append_le(&mut buf, v);
            }
        }
        let rngs = [
            &self.rngs.shuffle,
            &self.rngs.crop,
            &self.rngs.perturb,
            &self.rngs.mix,
            &self.rngs.dropout,
        ];
        for rng in rngs {
            buf.extend_from_slice(&rng.get_seed());
            buf.extend_from_slice(&rng.get_word_pos().to_le_bytes());
            buf.extend_from_slice(&rng.get_stream().to_le_bytes());
        }
        let kv = self.cfg.to_kv();
        buf.extend_from_slice(&(kv.len() as u32).to_le_bytes());
        buf.extend_from_slice(kv.as_bytes());
        // history rows so a resumed run carries the full curve
        buf.extend_from_slice(&(self.history.records.len() as u64).to_le_bytes());
        for r in &self.history.records {
            buf.extend_from_slice(&(r.epoch as u64).to_le_bytes());
            buf.push(match r.stage {
                Stage::Pretrain => 0,
                Stage::Joint => 1,
            });
            for v in [r.contrast_loss, r.cluster_loss, r.total_loss, r.nmi, r.ri] {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            buf.extend_from_slice(&(r.aware_count as u64).to_le_bytes());
        }
        self.encoder.save(path, &[(Self::TRAINER_TAG, buf)])
    }

    pub fn load_state(path: &Path, data: &Dataset) -> Result<Self> {
        let (encoder, extras) = Encoder::<E>::load(path)?;
        let payload = extras
            .iter()
            .find(|(tag, _)| *tag == Self::TRAINER_TAG)
            .map(|(_, b)| b.clone())
            .ok_or_else(|| Error::Checkpoint("missing trainer state section".into()))?;
        struct R<'a> {
            buf: &'a [u8],
            pos: usize,
        }
        impl<'a> R<'a> {
            fn take(&mut self, n: usize) -> Result<&'a [u8]> {
                if self.pos + n > self.buf.len() {
                    return Err(Error::Checkpoint("truncated trainer state".into()));
                }
                let s = &self.buf[self.pos..self.pos + n];
                self.pos += n;
                Ok(s)
            }
            fn u64(&mut self) -> Result<u64> {
                Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
            }
            fn f64(&mut self) -> Result<f64> {
                Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
            }
            fn u8(&mut self) -> Result<u8> {
                Ok(self.take(1)?[0])
            }
        }
        let mut r = R { buf: &payload, pos: 0 };

        let epoch = r.u64()? as usize;
        let variant = Variant::from_tag(r.u8()?)?;
        let centers = if r.u8()? == 1 {
            let k = r.u64()? as usize;
            let d = r.u64()? as usize;
            let mut vals = Vec::with_capacity(k * d);
            for _ in 0..k * d {
                vals.push(r.f64()?);
            }
            Some(Array2::from_shape_vec((k, d), vals).unwrap())
        } else {
            None
        };
        let opt_t = r.u64()?;
        let width = E::WIDTH as usize;
        let mut read_states = |r: &mut R| -> Result<Vec<ArrayD<E>>> {
            let mut out = Vec::with_capacity(encoder.params().len());
            for p in encoder.params() {
                let len = p.value.len();
                let raw = r.take(len * width)?;
                let vals: Vec<E> = (0..len).map(|i| E::read_le(&raw[i * width..])).collect();
                out.push(ArrayD::from_shape_vec(IxDyn(p.value.shape()), vals).unwrap());
            }
            Ok(out)
        };
        let m = read_states(&mut r)?;
        let v = read_states(&mut r)?;

        let mut rng_states = Vec::new();
        for _ in 0..5 {
            let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
            let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
            let stream = r.u64()?;
            let mut rng = ChaCha8Rng::from_seed(seed);
            rng.set_stream(stream);
            rng.set_word_pos(word_pos);
            rng_states.push(rng);
        }
        let kv_len = u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize;
        let kv = String::from_utf8(r.take(kv_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("bad config text".into()))?;
        let cfg = TrainConfig::from_kv(&kv)?;

        let n_records = r.u64()? as usize;
        let mut history = TrainHistory::default();
        for _ in 0..n_records {
            let epoch = r.u64()? as usize;
            let stage = if r.u8()? == 0 { Stage::Pretrain } else { Stage::Joint };
            let mut vals = [0.0f64; 5];
            for v in &mut vals {
                *v = r.f64()?;
            }
            let aware_count = r.u64()? as usize;
            history.records.push(EpochRecord {
                epoch,
                stage,
                contrast_loss: vals[0],
                cluster_loss: vals[1],
                total_loss: vals[2],
                nmi: vals[3],
                ri: vals[4],
                aware_count,
            });
        }

        let mut opt = AdamW::new(cfg.learning_rate, cfg.weight_decay, encoder.params());
        opt.t = opt_t;
        opt.m = m;
        opt.v = v;
        let mut rngs_iter = rng_states.into_iter();
        let rngs = RngSet {
            shuffle: rngs_iter.next().unwrap(),
            crop: rngs_iter.next().unwrap(),
            perturb: rngs_iter.next().unwrap(),
            mix: rngs_iter.next().unwrap(),
            dropout: rngs_iter.next().unwrap(),
        };
        Ok(Trainer {
            cfg,
            variant,
            data: data.clone(),
            encoder,
            opt,
            rngs,
            centers,
            epoch,
            history,
        })
    }
}

fn encode_view<E: Elem>(
    enc: &Encoder<E>,
    g: &mut Graph<E>,
    vars: &crate::encoder::EncoderVars,
    x: &Array2<f64>,
    dropout_p: f64,
    dropout_rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let dropout = if dropout_p > 0.0 {
        Some((dropout_p, dropout_rng))
    } else {
        None
    };
    enc.encode(g, vars, x, dropout)
}

/// Pooled instance embeddings for an arbitrary value matrix, chunked to bound
/// memory, converted to f64 for the clustering side.
pub fn pooled_embeddings<E: Elem>(enc: &Encoder<E>, values: &Array2<f64>) -> Result<Array2<f64>> {
    let (n, t) = values.dim();
    let d = enc.config().output_dims;
    let chunk = (8_000_000 / (t * d).max(1)).clamp(4, 128);
    let mut out = Array2::<f64>::zeros((n, d));
    let mut start = 0usize;
    while start < n {
        let end = (start + chunk).min(n);
        let block = values.slice(ndarray::s![start..end, ..]).to_owned();
        let z: Array3<E> = enc.encode_infer(&block)?;
        let pooled = pool_instance(&z);
        for (bi, i) in (start..end).enumerate() {
            for j in 0..d {
                out[[i, j]] = pooled[[bi, j]].to_f64();
            }
        }
        start = end;
    }
    Ok(out)
}

/// Outcome of a complete run.
pub struct FitOutcome<E: Elem> {
    pub encoder: Encoder<E>,
    pub clustering: MembershipMatrix,
    pub history: TrainHistory,
}

/// Full pipeline: pretraining followed by joint optimization.
pub fn fit<E: Elem>(data: &Dataset, cfg: &TrainConfig, variant: Variant) -> Result<FitOutcome<E>> {
    let mut tr = Trainer::<E>::new(data, cfg, variant)?;
    let clustering = tr.run()?;
    Ok(FitOutcome {
        encoder: tr.encoder,
        clustering,
        history: tr.history,
    })
}

/// Pretraining stage only: cluster-agnostic contrastive learning, no FCM,
/// no clustering loss.
pub fn pretrain<E: Elem>(
    encoder: Encoder<E>,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(Encoder<E>, TrainHistory)> {
    let mut c = cfg.clone();
    c.epochs_joint = 0;
    let mut tr = Trainer::with_encoder(encoder, data, &c, Variant::Full)?;
    while tr.epochs_done() < tr.epochs_total() {
        tr.run_epoch()?;
    }
    Ok((tr.encoder, tr.history))
}

/// Joint stage only, starting from a given (typically pretrained) encoder.
pub fn joint_optimize<E: Elem>(
    encoder: Encoder<E>,
    data: &Dataset,
    cfg: &TrainConfig,
    variant: Variant,
) -> Result<(Encoder<E>, MembershipMatrix, TrainHistory)> {
    let mut c = cfg.clone();
    c.epochs_pretrain = 0;
    let mut tr = Trainer::with_encoder(encoder, data, &c, variant)?;
    let mm = tr.run()?;
    Ok((tr.encoder, mm, tr.history))
}

/// One ablation cell: the whole two-stage pipeline with the named mechanism
/// disabled.
pub fn run_ablation<E: Elem>(
    data: &Dataset,
    cfg: &TrainConfig,
    variant: Variant,
) -> Result<FitOutcome<E>> {
    fit(data, cfg, variant)
}
