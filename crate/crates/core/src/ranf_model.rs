//! The retrieval-augmented neural field.
//!
//! For one target direction the network sees K retrieved subjects, each as a
//! dB magnitude `[F][2]` plus an ITD. Every retrieval is encoded on its own:
//! a strided conv stack turns the magnitude into `F′` positions of width C,
//! and a Fourier-feature embedding of (direction, retrieved ITD) becomes one
//! extra position at each end, giving K sequences of length `F′ + 2`.
//!
//! B core blocks then alternate two kinds of mixing. The sequence step runs a
//! bidirectional LSTM along each sequence. The TAC step mixes across the K
//! sequences position by position, through a fully connected layer whose
//! weight carries a rank-one update `u_target v_retrievedᵀ`. The K sequences
//! are averaged into one, whose middle positions decode to the target
//! magnitude and whose two ends predict an ITD residual over the mean
//! retrieved ITD.
//!
//! ```text
//!   retrieval k:  dB/20 ─ conv×4 ─┐
//!                 rff(d, τ_k) ─ fc ┴─ [start | F′ | end]
//!   B × ( x += LN(proj(BLSTM(x)))   per sequence
//!         x += LN(loraFC([gelu(fc_a x) ; mean_j gelu(fc_b x_j)])) )
//!   mean over k ─┬─ middle ─ post FC×E ─ deconv×4 ─ ×20 ─ dB
//!                └─ start+end ─ post FC×E ─ [· ; rff(d)] ─ head ─ Δ
//!   τ = Δ + mean_k τ_k
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bundle::{Direction, HrirSet};
use crate::dsp::{self, Hrir, Itd, ItdConfig, MagnitudeSpectrum};
use crate::error::{Error, Result};
use crate::nn::conv::{conv_out_len, Conv1d, ConvCache, Deconv1d, DeconvCache};
use crate::nn::layers::{gelu, gelu_backward, lora_select, LayerNorm, LayerNormCache, Linear, LoraCache, LoraFc, LoraPair, PRelu, Rff};
use crate::nn::lstm::{Blstm, BlstmCache};
use crate::nn::params::{load_params, save_params, Grads, ParamRole, ParamStore};
use crate::nn::tensor::{Scalar, Tensor};
use crate::retrieval::{FeatureStore, RetrievalResult};

/// Scale between dB and the network's internal units.
pub const DB_SCALE: f64 = 20.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RanfConfig {
    /// Encoded width C.
    pub channels: usize,
    /// Core blocks B.
    pub blocks: usize,
    /// LSTM units per direction.
    pub lstm_units: usize,
    /// Post-processing FC layers E on each output path.
    pub post_layers: usize,
    /// Default number of retrievals K.
    pub k: usize,
    pub itd_head_layers: usize,
    /// Width of the two TAC transforms.
    pub tac_hidden: usize,
    /// Impulse response length L; the spectrum has `L/2 + 1` bins.
    pub hrir_length: usize,
    pub sample_rate: u32,
    pub conv_layers: usize,
    pub conv_kernel: usize,
    pub rff_features: usize,
    pub rff_scale: f64,
    pub lora_init_std: f64,
}

impl Default for RanfConfig {
    fn default() -> Self {
        Self {
            channels: 128,
            blocks: 4,
            lstm_units: 64,
            post_layers: 2,
            k: 5,
            itd_head_layers: 2,
            tac_hidden: 64,
            hrir_length: 256,
            sample_rate: 48_000,
            conv_layers: 4,
            conv_kernel: 5,
            rff_features: 64,
            rff_scale: 1.0,
            lora_init_std: 0.02,
        }
    }
}

impl RanfConfig {
    pub fn bins(&self) -> usize {
        self.hrir_length / 2 + 1
    }

    /// Encoder widths after each conv layer, ending at C.
    pub fn encoder_channels(&self) -> Vec<usize> {
        (0..self.conv_layers)
            .map(|i| self.channels >> (self.conv_layers - 1 - i))
            .collect()
    }

    /// Sequence lengths through the encoder, starting at F.
    pub fn encoder_lengths(&self) -> Vec<usize> {
        let mut lens = vec![self.bins()];
        for _ in 0..self.conv_layers {
            let l = *lens.last().expect("non-empty");
            lens.push(conv_out_len(l, self.conv_kernel, 2, self.conv_kernel / 2));
        }
        lens
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("channels", self.channels),
            ("blocks", self.blocks),
            ("lstm_units", self.lstm_units),
            ("k", self.k),
            ("itd_head_layers", self.itd_head_layers),
            ("tac_hidden", self.tac_hidden),
            ("conv_layers", self.conv_layers),
            ("conv_kernel", self.conv_kernel),
            ("rff_features", self.rff_features),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.conv_kernel % 2 == 0 {
            return Err(Error::Config("conv_kernel must be odd".into()));
        }
        if self.channels % (1 << (self.conv_layers - 1)) != 0 {
            return Err(Error::Config(format!(
                "channels = {} must be divisible by 2^(conv_layers - 1)",
                self.channels
            )));
        }
        if self.hrir_length < 4 || !self.hrir_length.is_power_of_two() {
            return Err(Error::Config(format!(
                "hrir_length = {} must be a power of two >= 4",
                self.hrir_length
            )));
        }
        if self.sample_rate == 0 || !(self.rff_scale > 0.0) || !(self.lora_init_std > 0.0) {
            return Err(Error::Config("sample_rate, rff_scale and lora_init_std must be positive".into()));
        }
        Ok(())
    }

    pub fn itd_to_ms(&self, samples: f64) -> f64 {
        samples * 1e3 / f64::from(self.sample_rate)
    }
}

/// Deterministic 64-bit seed for a (seed, subject, purpose) triple.
pub fn subject_seed(seed: u64, subject: &str, salt: u64) -> u64 {
    // FNV-1a over the id, mixed with the run seed and a purpose tag.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in subject.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^ seed.rotate_left(17) ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// BLSTM along a sequence, projected back to C, normalized and added.
#[derive(Debug, Clone)]
pub struct SeqBlock {
    pub blstm: Blstm,
    pub proj: Linear,
    pub ln: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct SeqCache<T> {
    blstm: BlstmCache<T>,
    blstm_out: Tensor<T>,
    ln: LayerNormCache<T>,
}

impl SeqBlock {
    pub fn forward<T: Scalar>(&self, ps: &ParamStore<T>, x: &Tensor<T>) -> (Tensor<T>, SeqCache<T>) {
        let (h, blstm) = self.blstm.forward(ps, x);
        let p = self.proj.forward(ps, &h);
        let (mut y, ln) = self.ln.forward(ps, &p);
        y.add_assign(x);
        (
            y,
            SeqCache {
                blstm,
                blstm_out: h,
                ln,
            },
        )
    }

    pub fn backward<T: Scalar>(&self, ps: &ParamStore<T>, cache: &SeqCache<T>, gy: &Tensor<T>, grads: &mut Grads<T>) -> Tensor<T> {
        let gp = self.ln.backward(ps, &cache.ln, gy, grads);
        let gh = self
            .proj
            .backward(ps, &cache.blstm_out, &gp, grads, true)
            .expect("input gradient requested");
        let mut gx = self.blstm.backward(ps, &cache.blstm, &gh, grads);
        gx.add_assign(gy);
        gx
    }
}

/// Transform-average-concatenate across the K retrieval streams.
#[derive(Debug, Clone)]
pub struct Tac {
    pub fc_a: Linear,
    pub fc_b: Linear,
    pub lora: LoraFc,
    pub ln: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct TacCache<T> {
    x: Vec<Tensor<T>>,
    a_pre: Vec<Tensor<T>>,
    b_pre: Vec<Tensor<T>>,
    cat: Vec<Tensor<T>>,
    pairs: Vec<LoraPair>,
    lora: Vec<LoraCache<T>>,
    ln: Vec<LayerNormCache<T>>,
}

impl Tac {
    /// `y_k = x_k + LN(loraFC_k([gelu(fc_a x_k) ; mean_j gelu(fc_b x_j)]))`,
    /// with `pairs[k]` selecting the rank-one update of stream k.
    pub fn forward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        xs: &[Tensor<T>],
        pairs: &[LoraPair],
    ) -> Result<(Vec<Tensor<T>>, TacCache<T>)> {
        if xs.is_empty() || xs.len() != pairs.len() {
            return Err(Error::Shape(format!(
                "TAC got {} streams and {} LoRA selections",
                xs.len(),
                pairs.len()
            )));
        }
        let k = T::lit(xs.len() as f64);
        let a_pre: Vec<_> = xs.iter().map(|x| self.fc_a.forward(ps, x)).collect();
        let b_pre: Vec<_> = xs.iter().map(|x| self.fc_b.forward(ps, x)).collect();
        let mut m = gelu(&b_pre[0]);
        for b in &b_pre[1..] {
            m.add_assign(&gelu(b));
        }
        m.scale(T::one() / k);
        let mut ys = Vec::with_capacity(xs.len());
        let mut cat = Vec::with_capacity(xs.len());
        let mut lora = Vec::with_capacity(xs.len());
        let mut ln = Vec::with_capacity(xs.len());
        for (i, x) in xs.iter().enumerate() {
            let c = Tensor::concat_cols(&gelu(&a_pre[i]), &m);
            let (z, lc) = self.lora.forward(ps, &c, pairs[i]);
            let (mut y, lnc) = self.ln.forward(ps, &z);
            y.add_assign(x);
            ys.push(y);
            cat.push(c);
            lora.push(lc);
            ln.push(lnc);
        }
        Ok((
            ys,
            TacCache {
                x: xs.to_vec(),
                a_pre,
                b_pre,
                cat,
                pairs: pairs.to_vec(),
                lora,
                ln,
            },
        ))
    }

    pub fn backward<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        cache: &TacCache<T>,
        gys: &[Tensor<T>],
        grads: &mut Grads<T>,
    ) -> Vec<Tensor<T>> {
        let kn = gys.len();
        let hidden = self.fc_a.out_dim;
        let mut gm: Option<Tensor<T>> = None;
        let mut gxs = Vec::with_capacity(kn);
        for i in 0..kn {
            let gz = self.ln.backward(ps, &cache.ln[i], &gys[i], grads);
            let gcat = self
                .lora
                .backward(ps, &cache.cat[i], cache.pairs[i], &cache.lora[i], &gz, grads, true)
                .expect("input gradient requested");
            let (ga, gmi) = gcat.split_cols(hidden);
            match gm.as_mut() {
                Some(g) => g.add_assign(&gmi),
                None => gm = Some(gmi),
            }
            let ga_pre = gelu_backward(&cache.a_pre[i], &ga);
            let mut gx = self
                .fc_a
                .backward(ps, &cache.x[i], &ga_pre, grads, true)
                .expect("input gradient requested");
            gx.add_assign(&gys[i]);
            gxs.push(gx);
        }
        let mut gm = gm.expect("at least one stream");
        gm.scale(T::one() / T::lit(kn as f64));
        for (j, gx) in gxs.iter_mut().enumerate() {
            let gb_pre = gelu_backward(&cache.b_pre[j], &gm);
            let g = self
                .fc_b
                .backward(ps, &cache.x[j], &gb_pre, grads, true)
                .expect("input gradient requested");
            gx.add_assign(&g);
        }
        gxs
    }
}

#[derive(Debug, Clone)]
pub struct CoreBlock {
    pub seq: SeqBlock,
    pub tac: Tac,
}

/// E fully connected layers with GELU, each carrying a target-keyed
/// rank-one update.
#[derive(Debug, Clone)]
pub struct PostStack {
    pub layers: Vec<LoraFc>,
}

#[derive(Debug, Clone)]
pub struct PostCache<T> {
    inputs: Vec<Tensor<T>>,
    pre: Vec<Tensor<T>>,
    pairs: Vec<LoraPair>,
    lora: Vec<LoraCache<T>>,
}

impl PostStack {
    fn pairs<T: Scalar>(&self, ps: &ParamStore<T>, target: Option<&str>) -> Vec<LoraPair> {
        self.layers
            .iter()
            .map(|l| match target {
                Some(t) => LoraPair {
                    u: ps.id(&l.u_name(t)),
                    v: ps.id(&l.v_name(t)),
                },
                None => LoraPair::default(),
            })
            .collect()
    }

    pub fn forward<T: Scalar>(&self, ps: &ParamStore<T>, x: &Tensor<T>, target: Option<&str>) -> (Tensor<T>, PostCache<T>) {
        let pairs = self.pairs(ps, target);
        let mut cache = PostCache {
            inputs: Vec::new(),
            pre: Vec::new(),
            pairs: pairs.clone(),
            lora: Vec::new(),
        };
        let mut h = x.clone();
        for (l, &pair) in self.layers.iter().zip(&pairs) {
            let (z, lc) = l.forward(ps, &h, pair);
            cache.inputs.push(h);
            h = gelu(&z);
            cache.pre.push(z);
            cache.lora.push(lc);
        }
        (h, cache)
    }

    pub fn backward<T: Scalar>(&self, ps: &ParamStore<T>, cache: &PostCache<T>, gy: &Tensor<T>, grads: &mut Grads<T>) -> Tensor<T> {
        let mut g = gy.clone();
        for (i, l) in self.layers.iter().enumerate().rev() {
            let gz = gelu_backward(&cache.pre[i], &g);
            g = l
                .backward(ps, &cache.inputs[i], cache.pairs[i], &cache.lora[i], &gz, grads, true)
                .expect("input gradient requested");
        }
        g
    }
}

/// Layer layout of a RANF network. Parameter values live in a separate
/// [`ParamStore`], so one layout serves any number of parameter sets.
#[derive(Debug, Clone)]
pub struct RanfModel {
    config: RanfConfig,
    encoder: Vec<Conv1d>,
    encoder_act: Vec<PRelu>,
    rff_itd: Rff,
    rff_fc: Linear,
    blocks: Vec<CoreBlock>,
    post_mag: PostStack,
    post_itd: PostStack,
    decoder: Vec<Deconv1d>,
    decoder_act: Vec<PRelu>,
    rff_dir: Rff,
    itd_head: Vec<Linear>,
}

/// One retrieved subject's features at the desired direction.
#[derive(Debug, Clone, Copy)]
pub struct RetrievedEntry<'a> {
    pub subject: &'a str,
    /// dB magnitude `[F][2]`.
    pub db: &'a [f64],
    /// ITD in samples.
    pub itd: f64,
}

#[derive(Debug, Clone)]
pub struct RanfInput<'a> {
    pub direction: Direction,
    /// `None` runs the generic model (no target-side vectors).
    pub target: Option<&'a str>,
    /// Best first.
    pub retrieved: Vec<RetrievedEntry<'a>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RanfOutput {
    /// dB magnitude `[F][2]`.
    pub db: Vec<f64>,
    /// ITD in samples.
    pub itd: f64,
    /// Predicted residual over the mean retrieved ITD.
    pub delta: f64,
}

/// Loss gradient with respect to a [`RanfOutput`].
#[derive(Debug, Clone, PartialEq)]
pub struct OutputGrad {
    pub db: Vec<f64>,
    pub itd: f64,
}

struct StreamTape<T> {
    enc: Vec<ConvCache<T>>,
    enc_pre: Vec<Tensor<T>>,
    rff_out: Tensor<T>,
}

struct BlockTape<T> {
    seq: Vec<SeqCache<T>>,
    tac: TacCache<T>,
}

/// Everything the backward pass needs from one forward call.
pub struct Tape<T> {
    streams: Vec<StreamTape<T>>,
    blocks: Vec<BlockTape<T>>,
    mag: PostCache<T>,
    dec: Vec<DeconvCache<T>>,
    dec_pre: Vec<Tensor<T>>,
    itd: PostCache<T>,
    head_in: Vec<Tensor<T>>,
    head_pre: Vec<Tensor<T>>,
    seq_len: usize,
}

impl RanfModel {
    /// Builds the layout and registers freshly initialized shared and frozen
    /// parameters in `ps`, always in the same order.
    pub fn new<T: Scalar>(config: RanfConfig, ps: &mut ParamStore<T>, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.channels;
        let kernel = config.conv_kernel;
        let pad = kernel / 2;
        let widths = config.encoder_channels();
        let lens = config.encoder_lengths();

        let mut encoder = Vec::new();
        let mut encoder_act = Vec::new();
        let mut in_ch = 2;
        for (i, &w) in widths.iter().enumerate() {
            encoder.push(Conv1d::new(ps, &format!("enc.{i}"), in_ch, w, kernel, 2, pad, &mut rng)?);
            if i + 1 < widths.len() {
                encoder_act.push(PRelu::new(ps, &format!("enc.{i}.act"))?);
            }
            in_ch = w;
        }

        let rff_itd = Rff::new(ps, "rff_itd", 4, config.rff_features, config.rff_scale, &mut rng)?;
        let rff_fc = Linear::new(ps, "rff_fc", rff_itd.out_dim(), 2 * c, true, &mut rng)?;

        let mut blocks = Vec::new();
        for b in 0..config.blocks {
            let name = format!("block.{b}");
            let seq = SeqBlock {
                blstm: Blstm::new(ps, &format!("{name}.blstm"), c, config.lstm_units, &mut rng)?,
                proj: Linear::new(ps, &format!("{name}.proj"), 2 * config.lstm_units, c, true, &mut rng)?,
                ln: LayerNorm::new(ps, &format!("{name}.ln_seq"), c)?,
            };
            let tac = Tac {
                fc_a: Linear::new(ps, &format!("{name}.tac.fc_a"), c, config.tac_hidden, true, &mut rng)?,
                fc_b: Linear::new(ps, &format!("{name}.tac.fc_b"), c, config.tac_hidden, true, &mut rng)?,
                lora: LoraFc::new(ps, &format!("{name}.tac.lora"), 2 * config.tac_hidden, c, &mut rng)?,
                ln: LayerNorm::new(ps, &format!("{name}.tac.ln"), c)?,
            };
            blocks.push(CoreBlock { seq, tac });
        }

        let post = |ps: &mut ParamStore<T>, path: &str, rng: &mut ChaCha8Rng| -> Result<PostStack> {
            Ok(PostStack {
                layers: (0..config.post_layers)
                    .map(|e| LoraFc::new(ps, &format!("post_{path}.{e}"), c, c, rng))
                    .collect::<Result<_>>()?,
            })
        };
        let post_mag = post(ps, "mag", &mut rng)?;
        let post_itd = post(ps, "itd", &mut rng)?;

        let mut decoder = Vec::new();
        let mut decoder_act = Vec::new();
        let n = widths.len();
        for i in 0..n {
            let cin = widths[n - 1 - i];
            let cout = if i + 1 < n { widths[n - 2 - i] } else { 2 };
            let (lin, lout) = (lens[n - i], lens[n - 1 - i]);
            let op = Deconv1d::output_padding_for(lin, lout, kernel, 2, pad)
                .ok_or_else(|| Error::Config(format!("no deconvolution maps length {lin} to {lout}")))?;
            decoder.push(Deconv1d::new(ps, &format!("dec.{i}"), cin, cout, kernel, 2, pad, op, &mut rng)?);
            if i + 1 < n {
                decoder_act.push(PRelu::new(ps, &format!("dec.{i}.act"))?);
            }
        }

        let rff_dir = Rff::new(ps, "rff_dir", 3, config.rff_features, config.rff_scale, &mut rng)?;
        let mut itd_head = Vec::new();
        let mut width = c + rff_dir.out_dim();
        for h in 0..config.itd_head_layers {
            let out = if h + 1 < config.itd_head_layers { c } else { 1 };
            itd_head.push(Linear::new(ps, &format!("itd_head.{h}"), width, out, true, &mut rng)?);
            width = out;
        }

        Ok(Self {
            config,
            encoder,
            encoder_act,
            rff_itd,
            rff_fc,
            blocks,
            post_mag,
            post_itd,
            decoder,
            decoder_act,
            rff_dir,
            itd_head,
        })
    }

    pub fn config(&self) -> &RanfConfig {
        &self.config
    }

    pub fn blocks(&self) -> &[CoreBlock] {
        &self.blocks
    }

    pub fn post_layers(&self) -> impl Iterator<Item = &LoraFc> {
        self.post_mag.layers.iter().chain(&self.post_itd.layers)
    }

    /// Registers the target-side vectors of `subject`: zero `u` on every
    /// TAC layer, plus zero `u` and Gaussian `v` on every post layer.
    pub fn add_target<T: Scalar>(&self, ps: &mut ParamStore<T>, subject: &str, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(subject_seed(seed, subject, 1));
        let role = ParamRole::Target(subject.to_string());
        for b in &self.blocks {
            b.tac.lora.add_u(ps, subject, role.clone())?;
        }
        for l in self.post_mag.layers.iter().chain(&self.post_itd.layers) {
            l.add_u(ps, subject, role.clone())?;
            l.add_v(ps, subject, role.clone(), self.config.lora_init_std, &mut rng)?;
        }
        Ok(())
    }

    /// Registers the retrieved-side vectors of `subject`: Gaussian `v` on
    /// every TAC layer.
    pub fn add_retrieved<T: Scalar>(&self, ps: &mut ParamStore<T>, subject: &str, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(subject_seed(seed, subject, 2));
        let role = ParamRole::Retrieved(subject.to_string());
        for b in &self.blocks {
            b.tac.lora.add_v(ps, subject, role.clone(), self.config.lora_init_std, &mut rng)?;
        }
        Ok(())
    }

    fn tac_pairs<T: Scalar>(&self, ps: &ParamStore<T>, block: usize, input: &RanfInput<'_>) -> Result<Vec<LoraPair>> {
        input
            .retrieved
            .iter()
            .map(|r| lora_select(ps, &self.blocks[block].tac.lora, input.target, r.subject))
            .collect()
    }

    /// Runs one TAC block on K sequences; the ids select the LoRA vectors.
    pub fn tac_block<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        block: usize,
        sequences: &[Tensor<T>],
        target: Option<&str>,
        retrieved: &[&str],
    ) -> Result<Vec<Tensor<T>>> {
        let tac = &self
            .blocks
            .get(block)
            .ok_or_else(|| Error::InvalidArgument(format!("block {block} of {}", self.blocks.len())))?
            .tac;
        let pairs = retrieved
            .iter()
            .map(|r| lora_select(ps, &tac.lora, target, r))
            .collect::<Result<Vec<_>>>()?;
        Ok(tac.forward(ps, sequences, &pairs)?.0)
    }

    fn encode_stream<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        unit: [f64; 3],
        entry: &RetrievedEntry<'_>,
    ) -> Result<(Tensor<T>, StreamTape<T>)> {
        let f = self.config.bins();
        if entry.db.len() != 2 * f {
            return Err(Error::Shape(format!(
                "retrieved magnitude of {} has {} values, expected {}",
                entry.subject,
                entry.db.len(),
                2 * f
            )));
        }
        let scale = 1.0 / DB_SCALE;
        let mut x = Tensor::matrix(f, 2, entry.db.iter().map(|&v| T::lit(v * scale)).collect())?;
        let mut enc = Vec::new();
        let mut enc_pre = Vec::new();
        for (i, conv) in self.encoder.iter().enumerate() {
            let (y, cache) = conv.forward(ps, &x)?;
            enc.push(cache);
            x = match self.encoder_act.get(i) {
                Some(act) => {
                    let out = act.forward(ps, &y);
                    enc_pre.push(y);
                    out
                }
                None => y,
            };
        }
        let tau_ms = self.config.itd_to_ms(entry.itd);
        let rin = Tensor::matrix(1, 4, vec![T::lit(unit[0]), T::lit(unit[1]), T::lit(unit[2]), T::lit(tau_ms)])?;
        let rff_out = self.rff_itd.forward(ps, &rin);
        let ends = self.rff_fc.forward(ps, &rff_out);
        let (start, end) = ends.split_cols(self.config.channels);
        let seq = Tensor::concat_rows(&[&start, &x, &end]);
        Ok((seq, StreamTape { enc, enc_pre, rff_out }))
    }

    /// Forward pass returning the prediction and the tape for
    /// [`RanfModel::backward`].
    pub fn forward<T: Scalar>(&self, ps: &ParamStore<T>, input: &RanfInput<'_>) -> Result<(RanfOutput, Tape<T>)> {
        let k = input.retrieved.len();
        if k == 0 {
            return Err(Error::InvalidArgument("at least one retrieved subject is required".into()));
        }
        if !input.retrieved.iter().all(|r| r.itd.is_finite()) {
            return Err(Error::Numerical("non-finite retrieved ITD".into()));
        }
        let unit = input.direction.unit_vector();
        let mut seqs = Vec::with_capacity(k);
        let mut streams = Vec::with_capacity(k);
        for entry in &input.retrieved {
            let (s, t) = self.encode_stream(ps, unit, entry)?;
            seqs.push(s);
            streams.push(t);
        }
        let seq_len = seqs[0].rows();

        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (b, block) in self.blocks.iter().enumerate() {
            let mut seq_caches = Vec::with_capacity(k);
            for s in seqs.iter_mut() {
                let (y, c) = block.seq.forward(ps, s);
                *s = y;
                seq_caches.push(c);
            }
            let pairs = self.tac_pairs(ps, b, input)?;
            let (ys, tac) = block.tac.forward(ps, &seqs, &pairs)?;
            seqs = ys;
            blocks.push(BlockTape { seq: seq_caches, tac });
        }

        let mut avg = seqs[0].clone();
        for s in &seqs[1..] {
            avg.add_assign(s);
        }
        avg.scale(T::one() / T::lit(k as f64));

        let mid = avg.slice_rows(1, seq_len - 1);
        let (mut h, mag) = self.post_mag.forward(ps, &mid, input.target);
        let mut dec = Vec::new();
        let mut dec_pre = Vec::new();
        for (i, d) in self.decoder.iter().enumerate() {
            let (y, cache) = d.forward(ps, &h)?;
            dec.push(cache);
            h = match self.decoder_act.get(i) {
                Some(act) => {
                    let out = act.forward(ps, &y);
                    dec_pre.push(y);
                    out
                }
                None => y,
            };
        }
        h.ensure_finite("magnitude output")?;
        let db: Vec<f64> = h.data().iter().map(|v| v.as_f64() * DB_SCALE).collect();

        let mut ends = avg.slice_rows(0, 1);
        ends.add_assign(&avg.slice_rows(seq_len - 1, seq_len));
        let (e, itd) = self.post_itd.forward(ps, &ends, input.target);
        let unit_t = Tensor::matrix(1, 3, unit.iter().map(|&v| T::lit(v)).collect())?;
        let mut z = Tensor::concat_cols(&e, &self.rff_dir.forward(ps, &unit_t));
        let mut head_in = Vec::new();
        let mut head_pre = Vec::new();
        for (i, l) in self.itd_head.iter().enumerate() {
            let y = l.forward(ps, &z);
            head_in.push(z);
            z = if i + 1 < self.itd_head.len() {
                let g = gelu(&y);
                head_pre.push(y);
                g
            } else {
                y
            };
        }
        z.ensure_finite("ITD residual")?;
        let delta = z.data()[0].as_f64();
        let mean_tau = input.retrieved.iter().map(|r| r.itd).sum::<f64>() / k as f64;

        Ok((
            RanfOutput {
                db,
                itd: delta + mean_tau,
                delta,
            },
            Tape {
                streams,
                blocks,
                mag,
                dec,
                dec_pre,
                itd,
                head_in,
                head_pre,
                seq_len,
            },
        ))
    }

    /// Accumulates parameter gradients of a loss whose output gradient is
    /// `grad`.
    pub fn backward<T: Scalar>(&self, ps: &ParamStore<T>, tape: &Tape<T>, grad: &OutputGrad, grads: &mut Grads<T>) -> Result<()> {
        let f = self.config.bins();
        if grad.db.len() != 2 * f {
            return Err(Error::Shape(format!("output gradient has {} values, expected {}", grad.db.len(), 2 * f)));
        }
        let c = self.config.channels;
        let l = tape.seq_len;

        let mut g = Tensor::matrix(f, 2, grad.db.iter().map(|&v| T::lit(v * DB_SCALE)).collect())?;
        for (i, d) in self.decoder.iter().enumerate().rev() {
            if let Some(act) = self.decoder_act.get(i) {
                g = act.backward(ps, &tape.dec_pre[i], &g, grads);
            }
            g = d.backward(ps, &tape.dec[i], &g, grads, true).expect("input gradient requested");
        }
        let g_mid = self.post_mag.backward(ps, &tape.mag, &g, grads);

        let mut gz = Tensor::matrix(1, 1, vec![T::lit(grad.itd)])?;
        for (i, layer) in self.itd_head.iter().enumerate().rev() {
            if i + 1 < self.itd_head.len() {
                gz = gelu_backward(&tape.head_pre[i], &gz);
            }
            gz = layer
                .backward(ps, &tape.head_in[i], &gz, grads, true)
                .expect("input gradient requested");
        }
        let (ge, _) = gz.split_cols(c);
        let g_ends = self.post_itd.backward(ps, &tape.itd, &ge, grads);

        let k = tape.streams.len();
        let inv_k = T::one() / T::lit(k as f64);
        let mut g_avg = Tensor::zeros(&[l, c]);
        for r in 0..l - 2 {
            g_avg.row_mut(r + 1).copy_from_slice(g_mid.row(r));
        }
        for r in [0, l - 1] {
            for (a, &b) in g_avg.row_mut(r).iter_mut().zip(g_ends.row(0)) {
                *a += b;
            }
        }
        g_avg.scale(inv_k);
        let mut gs: Vec<Tensor<T>> = vec![g_avg; k];

        for (b, block) in self.blocks.iter().enumerate().rev() {
            let bt = &tape.blocks[b];
            gs = block.tac.backward(ps, &bt.tac, &gs, grads);
            for (s, gsk) in gs.iter_mut().enumerate() {
                *gsk = block.seq.backward(ps, &bt.seq[s], gsk, grads);
            }
        }

        for (s, gsk) in gs.iter().enumerate() {
            let st = &tape.streams[s];
            let g_ends = Tensor::concat_cols(&gsk.slice_rows(0, 1), &gsk.slice_rows(l - 1, l));
            self.rff_fc.backward(ps, &st.rff_out, &g_ends, grads, false);
            let mut g = gsk.slice_rows(1, l - 1);
            for (i, conv) in self.encoder.iter().enumerate().rev() {
                if let Some(act) = self.encoder_act.get(i) {
                    g = act.backward(ps, &st.enc_pre[i], &g, grads);
                }
                match conv.backward(ps, &st.enc[i], &g, grads, i > 0) {
                    Some(gx) => g = gx,
                    None => break,
                }
            }
        }
        grads.ensure_finite()
    }
}

/// Sidecar metadata stored next to a parameter container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSidecar {
    pub config: RanfConfig,
    /// Seed used for shared-weight and LoRA initialization.
    pub seed: u64,
    /// Retrieval criterion, e.g. `itd`.
    pub criterion: String,
    pub k: usize,
    /// Measured grid indices used to retrieve during pretraining.
    pub measured: Vec<usize>,
    /// Subjects with target-side vectors; position = LoRA index.
    pub targets: Vec<String>,
    /// Subjects with retrieved-side vectors; position = LoRA index.
    pub retrieved: Vec<String>,
    /// Retrieved ids per target, best first.
    pub retrievals: BTreeMap<String, Vec<String>>,
}

/// A model layout with its parameters and sidecar.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: RanfModel,
    pub params: ParamStore<f32>,
    pub sidecar: ModelSidecar,
}

impl Checkpoint {
    pub fn sidecar_path(path: &Path) -> PathBuf {
        let mut p = path.as_os_str().to_owned();
        p.push(".json");
        PathBuf::from(p)
    }

    /// Writes the parameter container at `path` and the sidecar at
    /// `path.json`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut sidecar = self.sidecar.clone();
        sidecar.targets = self.params.subjects(true);
        sidecar.retrieved = self.params.subjects(false);
        save_params(path, &self.params, &BTreeMap::new())?;
        let side = Self::sidecar_path(path);
        let text = serde_json::to_string_pretty(&sidecar)?;
        std::fs::write(&side, text + "\n").map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side = Self::sidecar_path(path);
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let sidecar: ModelSidecar = serde_json::from_str(&text)?;
        let (params, _) = load_params::<f32>(path)?;
        let mut fresh = ParamStore::<f32>::new();
        let model = RanfModel::new(sidecar.config.clone(), &mut fresh, sidecar.seed)?;
        // The layout refers to parameters by position; the container must
        // list the shared part in construction order.
        for (id, p) in fresh.iter() {
            let q = (id.index() < params.len()).then(|| params.param(id));
            match q {
                Some(q) if q.name == p.name && q.shape == p.shape && q.role == p.role => {}
                _ => {
                    return Err(Error::Checkpoint(format!(
                        "{}: parameter #{} should be {:?} {:?}",
                        path.display(),
                        id.index(),
                        p.name,
                        p.shape
                    )))
                }
            }
        }
        Ok(Self { model, params, sidecar })
    }
}

/// Prediction settings shared by [`predict_subject`] callers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictConfig {
    pub itd: ItdConfig,
    /// Onset delay shared by both ears of every predicted response.
    pub base_delay: usize,
}

impl Default for PredictConfig {
    fn default() -> Self {
        Self {
            itd: ItdConfig::default(),
            base_delay: 0,
        }
    }
}

/// Converts a predicted (dB magnitude, ITD) pair to an impulse response:
/// minimum phase, then the ear delay whose [`dsp::estimate_itd`] comes
/// closest to the rounded, clamped ITD.
///
/// Targets are estimator ITDs, which include the onset offset that a pair
/// with unequal ear spectra has on its own. Applying them as raw delays
/// would count that offset twice, so the delay is corrected until the
/// estimate matches.
pub fn render_hrir(db: &[f64], itd: f64, sample_rate: u32, cfg: &PredictConfig) -> Result<Hrir> {
    let bins = db.len() / 2;
    let mag = MagnitudeSpectrum::from_db(bins, db)?;
    let h = dsp::min_phase_reconstruct(&mag)?;
    let len = h[0].len();
    let limit = cfg
        .itd
        .max_samples(sample_rate)
        .min((len / 2).saturating_sub(1) as f64)
        .min(len.saturating_sub(cfg.base_delay + 1) as f64)
        .floor();
    let target = itd.clamp(-limit, limit).round();
    let mut shift = target;
    let mut best: Option<(f64, Hrir)> = None;
    for _ in 0..RENDER_ITD_STEPS {
        let out = dsp::apply_itd(&h, Itd(shift), cfg.base_delay)?;
        let miss = target - dsp::estimate_itd(&out, sample_rate, &cfg.itd)?.samples();
        if best.as_ref().is_none_or(|(m, _)| miss.abs() < m.abs()) {
            best = Some((miss, out));
        }
        let next = (shift + miss).clamp(-limit, limit);
        if miss == 0.0 || next == shift {
            break;
        }
        shift = next;
    }
    Ok(best.expect("at least one step").1)
}

/// Delay corrections tried by [`render_hrir`].
const RENDER_ITD_STEPS: usize = 4;

/// Predicts the target's responses at `directions` (grid indices) from its
/// retrieved subjects.
pub fn predict_subject<T: Scalar>(
    model: &RanfModel,
    ps: &ParamStore<T>,
    store: &FeatureStore<'_>,
    target_id: &str,
    retrieval: &RetrievalResult,
    directions: &[usize],
    cfg: &PredictConfig,
) -> Result<HrirSet> {
    let bundle = store.bundle();
    let fs = bundle.sample_rate();
    let grid = bundle.grid();
    let target = ps.subjects(true).into_iter().any(|s| s == target_id).then_some(target_id);
    let hrirs = directions
        .par_iter()
        .map(|&d| {
            let dir = *grid.get(d).ok_or(Error::OffGrid(d))?;
            let feats = retrieval
                .subjects
                .iter()
                .map(|s| store.features(s, d))
                .collect::<Result<Vec<_>>>()?;
            let input = RanfInput {
                direction: dir,
                target,
                retrieved: retrieval
                    .subjects
                    .iter()
                    .zip(&feats)
                    .map(|(s, f)| RetrievedEntry {
                        subject: s,
                        db: &f.db,
                        itd: f.itd.0,
                    })
                    .collect(),
            };
            let (out, _) = model.forward(ps, &input)?;
            render_hrir(&out.db, out.itd, fs, cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    HrirSet::from_hrirs(target_id, fs, &hrirs)
}
