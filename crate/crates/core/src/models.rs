//! Concrete architectures: the pre-trained autoencoder and the lightweight
//! 1-d U-Net noise predictor, plus autoencoder pre-training.

use crate::error::{Error, Result};
use crate::graph::{Graph, GraphBuilder, LayerSpec, Port};
use crate::optim::{mse_loss, sgd_step};
use crate::params::ParameterSet;
use crate::rng;
use crate::tensor::{Real, Tensor};
use rand::seq::SliceRandom;
use std::path::Path;

pub const DEFAULT_HIDDEN_DIM: usize = 100;
pub const DEFAULT_LATENT_DIM: usize = 16;

/// Dense autoencoder: encoder F -> hidden -> latent (ReLU after the hidden
/// layer, linear latent), decoder latent -> hidden -> F (ReLU after the
/// hidden layer, sigmoid output so reconstructions stay in [0,1]).
#[derive(Debug, Clone)]
pub struct AutoencoderModel {
    pub encoder: Graph,
    pub decoder: Graph,
    pub params: ParameterSet,
    input_dim: usize,
    latent_dim: usize,
}

fn encoder_graph(input_dim: usize, hidden: usize, latent: usize) -> Result<Graph> {
    let mut b = GraphBuilder::new(vec![input_dim]);
    let h = b.add(LayerSpec::Dense { input: input_dim, output: hidden }, &[Port::Input])?;
    let h = b.add(LayerSpec::Relu, &[h])?;
    let z = b.add(LayerSpec::Dense { input: hidden, output: latent }, &[h])?;
    b.finish(z, "enc.")
}

fn decoder_graph(input_dim: usize, hidden: usize, latent: usize) -> Result<Graph> {
    let mut b = GraphBuilder::new(vec![latent]);
    let h = b.add(LayerSpec::Dense { input: latent, output: hidden }, &[Port::Input])?;
    let h = b.add(LayerSpec::Relu, &[h])?;
    let x = b.add(LayerSpec::Dense { input: hidden, output: input_dim }, &[h])?;
    let x = b.add(LayerSpec::Sigmoid, &[x])?;
    b.finish(x, "dec.")
}

impl AutoencoderModel {
    pub fn new(input_dim: usize, hidden: usize, latent_dim: usize, seed: u64) -> Result<Self> {
        let encoder = encoder_graph(input_dim, hidden, latent_dim)?;
        let decoder = decoder_graph(input_dim, hidden, latent_dim)?;
        let mut params = ParameterSet::new();
        encoder.init_params(&mut params, rng::derive_seed(seed, &[0xae, 0]))?;
        decoder.init_params(&mut params, rng::derive_seed(seed, &[0xae, 1]))?;
        Ok(AutoencoderModel { encoder, decoder, params, input_dim, latent_dim })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    /// Map rating vectors `[batch, F]` to latents `[batch, latent]`.
    pub fn encode(&self, ratings: &Tensor) -> Result<Tensor> {
        let (out, _) = self.encoder.forward(&self.params, ratings, None)?;
        Ok(out)
    }

    /// Map latents `[batch, latent]` back to rating space `[batch, F]`.
    pub fn decode(&self, latents: &Tensor) -> Result<Tensor> {
        let (out, _) = self.decoder.forward(&self.params, latents, None)?;
        Ok(out)
    }

    /// Mean squared reconstruction error over `data` rows.
    pub fn reconstruction_mse(&self, data: &Tensor) -> Result<Real> {
        let recon = self.decode(&self.encode(data)?)?;
        Ok(mse_loss(&recon, data)?.0)
    }

    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{stem}.enc.arch")), self.encoder.to_descriptor())?;
        std::fs::write(dir.join(format!("{stem}.dec.arch")), self.decoder.to_descriptor())?;
        self.params.save(&dir.join(format!("{stem}.flpm")))
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let enc_text = std::fs::read_to_string(dir.join(format!("{stem}.enc.arch")))?;
        let dec_text = std::fs::read_to_string(dir.join(format!("{stem}.dec.arch")))?;
        let encoder = crate::graph::graph_from_descriptor(&enc_text)?;
        let decoder = crate::graph::graph_from_descriptor(&dec_text)?;
        let params = ParameterSet::load(&dir.join(format!("{stem}.flpm")))?;
        let input_dim = encoder.input_shape()[0];
        let latent_dim = encoder.output_shape()[0];
        if decoder.input_shape() != [latent_dim] || decoder.output_shape() != [input_dim] {
            return Err(Error::data("encoder/decoder descriptors disagree on dimensions".to_string()));
        }
        Ok(AutoencoderModel { encoder, decoder, params, input_dim, latent_dim })
    }
}

/// Train an autoencoder on public rating vectors with SGD on elementwise
/// MSE. Deterministic for a fixed seed.
pub fn pretrain_autoencoder(
    public_data: &Tensor,
    epochs: usize,
    learning_rate: Real,
    batch_size: usize,
    seed: u64,
) -> Result<AutoencoderModel> {
    pretrain_autoencoder_dims(
        public_data,
        DEFAULT_HIDDEN_DIM,
        DEFAULT_LATENT_DIM,
        epochs,
        learning_rate,
        batch_size,
        seed,
    )
}

pub fn pretrain_autoencoder_dims(
    public_data: &Tensor,
    hidden: usize,
    latent: usize,
    epochs: usize,
    learning_rate: Real,
    batch_size: usize,
    seed: u64,
) -> Result<AutoencoderModel> {
    if public_data.rank() != 2 || public_data.shape()[0] == 0 {
        return Err(Error::config("autoencoder pre-training needs a non-empty [rows, F] matrix".to_string()));
    }
    if batch_size == 0 {
        return Err(Error::config("batch_size must be positive".to_string()));
    }
    if public_data.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::config("autoencoder training data must lie in [0,1]".to_string()));
    }
    let rows = public_data.shape()[0];
    let dim = public_data.shape()[1];
    let mut model = AutoencoderModel::new(dim, hidden, latent, rng::derive_seed(seed, &[0xae]))?;

    let mut order: Vec<usize> = (0..rows).collect();
    for epoch in 0..epochs {
        let mut shuffle_rng = rng::rng_from(seed, &[0xa3, epoch as u64]);
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(batch_size.min(rows)) {
            let mut batch = Tensor::zeros(vec![chunk.len(), dim]);
            for (row, &src) in chunk.iter().enumerate() {
                batch.data_mut()[row * dim..(row + 1) * dim]
                    .copy_from_slice(&public_data.data()[src * dim..(src + 1) * dim]);
            }
            let (z, mut enc_tape) = model.encoder.forward(&model.params, &batch, None)?;
            let (recon, mut dec_tape) = model.decoder.forward(&model.params, &z, None)?;
            let (_, grad) = mse_loss(&recon, &batch)?;
            let dz = model.decoder.backward(&mut model.params, &mut dec_tape, &grad)?;
            model.encoder.backward(&mut model.params, &mut enc_tape, &dz)?;
            sgd_step(&mut model.params, learning_rate)?;
        }
    }
    Ok(model)
}

/// Latent bridge used by the pipeline: either the trained autoencoder or an
/// identity map (the raw-space baseline trains the diffusion model directly
/// on F-dimensional vectors).
#[derive(Debug, Clone)]
pub enum Codec {
    Autoencoder(AutoencoderModel),
    Identity { dim: usize },
}

impl Codec {
    pub fn latent_dim(&self) -> usize {
        match self {
            Codec::Autoencoder(m) => m.latent_dim(),
            Codec::Identity { dim } => *dim,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Codec::Autoencoder(m) => m.input_dim(),
            Codec::Identity { dim } => *dim,
        }
    }

    pub fn encode(&self, ratings: &Tensor) -> Result<Tensor> {
        match self {
            Codec::Autoencoder(m) => m.encode(ratings),
            Codec::Identity { .. } => Ok(ratings.clone()),
        }
    }

    pub fn decode(&self, latents: &Tensor) -> Result<Tensor> {
        match self {
            Codec::Autoencoder(m) => m.decode(latents),
            Codec::Identity { .. } => Ok(latents.clone()),
        }
    }
}

/// U-Net channel widths per resolution; one fourth of the 128/256/512
/// baseline this architecture is scaled down from.
pub const UNET_WIDTHS: [usize; 3] = [32, 64, 128];
pub const TIME_EMBED_DIM: usize = 64;
const TIME_MLP_DIM: usize = 384;

/// Noise predictor over flat latent vectors: sinusoidal time embedding with
/// a two-layer projection, the latent reshaped to one channel, three
/// resolutions L -> L/2 -> L/4 with mirrored upsampling and skip
/// concatenation.
#[derive(Debug, Clone)]
pub struct DenoiserModel {
    pub graph: Graph,
    pub params: ParameterSet,
    latent_dim: usize,
}

fn res_block(
    b: &mut GraphBuilder,
    x: Port,
    channels: usize,
    temb: Port,
) -> Result<Port> {
    let h = b.add(LayerSpec::LayerNorm { channels }, &[x])?;
    let h = b.add(LayerSpec::Silu, &[h])?;
    let h = b.add(LayerSpec::Conv1d { in_channels: channels, out_channels: channels, kernel: 3 }, &[h])?;
    let tp = b.add(LayerSpec::Dense { input: TIME_MLP_DIM, output: channels }, &[temb])?;
    let h = b.add(LayerSpec::BroadcastAdd, &[h, tp])?;
    let h = b.add(LayerSpec::LayerNorm { channels }, &[h])?;
    let h = b.add(LayerSpec::Silu, &[h])?;
    let h = b.add(LayerSpec::Conv1d { in_channels: channels, out_channels: channels, kernel: 3 }, &[h])?;
    b.add(LayerSpec::BroadcastAdd, &[h, x])
}

/// Build the U-Net graph for a given input length (16 for the latent model;
/// the raw-space baseline passes F). The length must be divisible by 4 so
/// the two stride-2 stages round-trip exactly.
pub fn build_unet_graph(input_len: usize, prefix: &str) -> Result<Graph> {
    if input_len % 4 != 0 || input_len < 4 {
        return Err(Error::config(format!(
            "denoiser input length must be a positive multiple of 4, got {input_len}"
        )));
    }
    let [c1, c2, c3] = UNET_WIDTHS;
    let mut b = GraphBuilder::new(vec![input_len]);

    let temb = b.add(LayerSpec::SinusoidalTimeEmbedding { dim: TIME_EMBED_DIM }, &[Port::Time])?;
    let temb = b.add(LayerSpec::Dense { input: TIME_EMBED_DIM, output: TIME_MLP_DIM }, &[temb])?;
    let temb = b.add(LayerSpec::Silu, &[temb])?;
    let temb = b.add(LayerSpec::Dense { input: TIME_MLP_DIM, output: TIME_MLP_DIM }, &[temb])?;

    let x = b.add(LayerSpec::Reshape { dims: vec![1, input_len] }, &[Port::Input])?;
    let mut h = b.add(LayerSpec::Conv1d { in_channels: 1, out_channels: c1, kernel: 3 }, &[x])?;
    h = res_block(&mut b, h, c1, temb)?;
    h = res_block(&mut b, h, c1, temb)?;
    let d1 = h;

    h = b.add(
        LayerSpec::StridedDownsample { in_channels: c1, out_channels: c2, kernel: 3, stride: 2 },
        &[h],
    )?;
    h = res_block(&mut b, h, c2, temb)?;
    h = res_block(&mut b, h, c2, temb)?;
    let d2 = h;

    h = b.add(
        LayerSpec::StridedDownsample { in_channels: c2, out_channels: c3, kernel: 3, stride: 2 },
        &[h],
    )?;
    h = res_block(&mut b, h, c3, temb)?;
    h = res_block(&mut b, h, c3, temb)?;

    h = b.add(LayerSpec::NearestUpsample { factor: 2 }, &[h])?;
    h = b.add(LayerSpec::SkipConcat, &[h, d2])?;
    h = b.add(LayerSpec::Conv1d { in_channels: c3 + c2, out_channels: c2, kernel: 3 }, &[h])?;
    h = res_block(&mut b, h, c2, temb)?;

    h = b.add(LayerSpec::NearestUpsample { factor: 2 }, &[h])?;
    h = b.add(LayerSpec::SkipConcat, &[h, d1])?;
    h = b.add(LayerSpec::Conv1d { in_channels: c2 + c1, out_channels: c1, kernel: 3 }, &[h])?;
    h = res_block(&mut b, h, c1, temb)?;

    h = b.add(LayerSpec::LayerNorm { channels: c1 }, &[h])?;
    h = b.add(LayerSpec::Silu, &[h])?;
    h = b.add(LayerSpec::Conv1d { in_channels: c1, out_channels: 1, kernel: 3 }, &[h])?;
    let out = b.add(LayerSpec::Reshape { dims: vec![input_len] }, &[h])?;
    b.finish(out, prefix)
}

impl DenoiserModel {
    pub fn build(latent_dim: usize, seed: u64) -> Result<Self> {
        let graph = build_unet_graph(latent_dim, "dn.")?;
        let mut params = ParameterSet::new();
        graph.init_params(&mut params, rng::derive_seed(seed, &[0xd3]))?;
        Ok(DenoiserModel { graph, params, latent_dim })
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn param_count(&self) -> usize {
        self.graph.param_count()
    }

    /// Predict the noise component of `x_t` (`[batch, latent]`) at per-row
    /// steps `t`, each within `1..=t_max`.
    pub fn denoise(&self, x_t: &Tensor, t: &[usize], t_max: usize) -> Result<Tensor> {
        self.denoise_with(&self.params, x_t, t, t_max)
    }

    /// Like [`denoise`](Self::denoise) but against an explicit parameter set
    /// (used during training where parameters live outside the model).
    pub fn denoise_with(
        &self,
        params: &ParameterSet,
        x_t: &Tensor,
        t: &[usize],
        t_max: usize,
    ) -> Result<Tensor> {
        if let Some(&bad) = t.iter().find(|&&tv| tv == 0 || tv > t_max) {
            return Err(Error::usage(format!("time step {bad} outside 1..={t_max}")));
        }
        let (out, _) = self.graph.forward(params, x_t, Some(t))?;
        Ok(out)
    }

    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{stem}.arch")), self.graph.to_descriptor())?;
        self.params.save(&dir.join(format!("{stem}.flpm")))
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join(format!("{stem}.arch")))?;
        let graph = crate::graph::graph_from_descriptor(&text)?;
        let params = ParameterSet::load(&dir.join(format!("{stem}.flpm")))?;
        let latent_dim = graph.input_shape()[0];
        Ok(DenoiserModel { graph, params, latent_dim })
    }
}
