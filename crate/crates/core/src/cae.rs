//! Per-dimension convolutional autoencoders and the two-channel encoding of
//! density matrices.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{ComplexMatrix, DensityMatrix, LinalgError};
use crate::nn::{BatchStats, ConvGeom, Graph, LayerConfig, NnError, Real, Tensor, Var};

/// Negative slope assumed by the Kaiming-uniform initializer.
pub const INIT_SLOPE: f64 = 0.01;
/// Identifier of the weight initialization recipe, stored in checkpoints.
pub const INIT_RECIPE: &str =
    "kaiming_uniform_fan_in(a=0.01,convT=cin*k*k);bias=0;bn_gamma=1;bn_beta=0";

#[derive(Debug, Error)]
pub enum CaeError {
    #[error("no built-in architecture for local dimension {0} (supported: 2..=7)")]
    UnsupportedDimension(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid architecture: {0}")]
    InvalidSpec(String),
    #[error("model parameters are missing or malformed: {0}")]
    UninitializedParameters(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Encoder, latent batch norm and decoder of one autoencoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub d: usize,
    pub encoder_layers: Vec<LayerConfig>,
    pub latent_batchnorm: LayerConfig,
    pub decoder_layers: Vec<LayerConfig>,
    /// Side of the raw decoder output after output padding is solved. When it
    /// differs from `d²` the output is center-cropped or zero-padded.
    #[serde(default)]
    pub raw_output_side: Option<usize>,
}

fn table(
    d: usize,
    enc: &[(usize, usize, usize, usize)],
    dec: &[(usize, usize, usize, usize)],
    act: [Act; 3],
    drop: f64,
) -> ArchitectureSpec {
    // Each block is conv, batch norm, activation, dropout; the decoder's last
    // transposed conv stands alone.
    let block = |layers: &mut Vec<LayerConfig>, conv: LayerConfig, out: usize, a: Act| {
        layers.push(conv);
        layers.push(LayerConfig::bn(out));
        layers.push(a.layer());
        layers.push(LayerConfig::dropout(drop));
    };
    let mut encoder_layers = Vec::new();
    let mut cin = 2;
    for (i, &(out, k, s, p)) in enc.iter().enumerate() {
        block(
            &mut encoder_layers,
            LayerConfig::conv(cin, out, k, s, p),
            out,
            act[i],
        );
        cin = out;
    }
    let latent_batchnorm = LayerConfig::bn(cin);
    let mut decoder_layers = Vec::new();
    let dec_acts = [act[1], act[0]];
    for (i, &(out, k, s, p)) in dec.iter().enumerate() {
        if i + 1 == dec.len() {
            decoder_layers.push(LayerConfig::conv_t(cin, out, k, s, p));
        } else {
            block(
                &mut decoder_layers,
                LayerConfig::conv_t(cin, out, k, s, p),
                out,
                dec_acts[i],
            );
        }
        cin = out;
    }
    ArchitectureSpec {
        d,
        encoder_layers,
        latent_batchnorm,
        decoder_layers,
        raw_output_side: None,
    }
}

#[derive(Debug, Clone, Copy)]
enum Act {
    Leaky(f64),
    Gelu,
}

impl Act {
    fn layer(self) -> LayerConfig {
        match self {
            Act::Leaky(s) => LayerConfig::leaky(s),
            Act::Gelu => LayerConfig::GELU,
        }
    }
}

/// The published architecture for local dimension `d`, with output padding
/// already solved.
pub fn builtin_spec(d: usize) -> Result<ArchitectureSpec, CaeError> {
    use Act::{Gelu, Leaky};
    let mut spec = match d {
        2 => table(
            2,
            &[(200, 2, 2, 0), (133, 2, 2, 0)],
            &[(200, 2, 2, 0), (2, 2, 2, 0)],
            [Leaky(0.01), Gelu, Leaky(0.01)],
            0.5,
        ),
        3 => table(
            3,
            &[(150, 3, 2, 1), (100, 3, 2, 1), (75, 3, 2, 1)],
            &[(100, 3, 2, 1), (150, 3, 2, 1), (2, 3, 2, 1)],
            [Leaky(0.01), Gelu, Leaky(0.01)],
            0.2,
        ),
        4 => table(
            4,
            &[(200, 4, 2, 1), (100, 4, 2, 1), (66, 4, 2, 1)],
            &[(100, 4, 2, 1), (200, 4, 2, 1), (2, 4, 2, 1)],
            [Leaky(0.1), Gelu, Leaky(0.1)],
            0.01,
        ),
        5 => table(
            5,
            &[(200, 5, 2, 2), (100, 5, 2, 2), (66, 5, 2, 2)],
            &[(100, 5, 2, 2), (200, 5, 2, 2), (2, 5, 2, 2)],
            [Leaky(0.1), Gelu, Leaky(0.1)],
            0.01,
        ),
        6 => table(
            6,
            &[(80, 12, 1, 5), (40, 12, 3, 5), (26, 12, 1, 5)],
            &[(40, 12, 1, 5), (80, 12, 3, 5), (2, 12, 1, 5)],
            [Leaky(0.01), Gelu, Leaky(0.01)],
            0.2,
        ),
        7 => table(
            7,
            &[(70, 15, 2, 7), (35, 15, 4, 7), (23, 15, 2, 7)],
            &[(35, 15, 2, 7), (70, 15, 5, 7), (2, 15, 2, 13)],
            [Leaky(0.1), Gelu, Leaky(0.1)],
            0.1,
        ),
        _ => return Err(CaeError::UnsupportedDimension(d)),
    };
    spec.resolve_shapes()?;
    Ok(spec)
}

impl ArchitectureSpec {
    /// Encoder, latent batch norm and decoder in execution order.
    pub fn layers(&self) -> impl Iterator<Item = &LayerConfig> {
        self.encoder_layers
            .iter()
            .chain(std::iter::once(&self.latent_batchnorm))
            .chain(self.decoder_layers.iter())
    }

    pub fn input_side(&self) -> usize {
        self.d * self.d
    }

    /// Checks every layer and the channel chain `2 → … → 2`.
    pub fn validate(&self) -> Result<(), CaeError> {
        if !(2..=7).contains(&self.d) {
            return Err(CaeError::UnsupportedDimension(self.d));
        }
        if !matches!(self.latent_batchnorm, LayerConfig::BatchNorm2D { .. }) {
            return Err(CaeError::InvalidSpec(
                "latent layer must be a batch norm".into(),
            ));
        }
        let mut channels = 2;
        for (i, layer) in self.layers().enumerate() {
            layer.validate()?;
            if matches!(layer, LayerConfig::Linear { .. } | LayerConfig::Softmax) {
                return Err(CaeError::InvalidSpec(format!(
                    "layer {i}: {:?} is not allowed in an autoencoder",
                    layer.kind()
                )));
            }
            if let Some((cin, cout)) = layer.channels() {
                if cin != channels {
                    return Err(CaeError::InvalidSpec(format!(
                        "layer {i} expects {cin} input channels but receives {channels}"
                    )));
                }
                channels = cout;
            }
        }
        if channels != 2 {
            return Err(CaeError::InvalidSpec(format!(
                "network ends with {channels} channels, expected 2"
            )));
        }
        Ok(())
    }

    fn spatial_sizes(&self) -> Result<Vec<usize>, CaeError> {
        let mut sizes = vec![self.input_side()];
        for layer in &self.encoder_layers {
            if let (LayerConfig::Conv2D { .. }, Some(geom)) = (layer, layer.geom()) {
                let last = *sizes.last().unwrap();
                let next = geom.conv_out(last).ok_or_else(|| {
                    CaeError::ShapeMismatch(format!(
                        "encoder kernel {} exceeds input side {last}",
                        geom.kernel
                    ))
                })?;
                sizes.push(next);
            }
        }
        Ok(sizes)
    }

    /// Solves each decoder layer's output padding so that the decoder
    /// mirrors the encoder's spatial sizes and ends at `d²`.
    ///
    /// All combinations with `output_padding < stride` are tried; the first
    /// one (lexicographically) that reaches `d²` with the most mirrored
    /// intermediate sizes wins. When none reaches `d²`, the best mirror is
    /// kept and the output is center-cropped or padded at run time.
    pub fn resolve_shapes(&mut self) -> Result<(), CaeError> {
        self.validate()?;
        let enc = self.spatial_sizes()?;
        let latent = *enc.last().unwrap();
        let target = self.input_side();
        let geoms: Vec<ConvGeom> = self
            .decoder_layers
            .iter()
            .filter(|l| matches!(l, LayerConfig::ConvTranspose2D { .. }))
            .filter_map(LayerConfig::geom)
            .collect();
        let mirror = |i: usize| -> Option<usize> {
            (geoms.len() + 1 == enc.len()).then(|| enc[enc.len() - 2 - i])
        };
        let combos: usize = geoms.iter().map(|g| g.stride).product();
        if combos > 1 << 20 {
            return Err(CaeError::InvalidSpec(
                "too many output-padding combinations".into(),
            ));
        }
        let mut best: Option<((bool, usize), Vec<usize>, usize)> = None;
        for mut code in 0..combos {
            let ops: Vec<usize> = geoms
                .iter()
                .map(|g| {
                    let op = code % g.stride;
                    code /= g.stride;
                    op
                })
                .collect();
            let mut side = latent;
            let mut matches = 0;
            let mut ok = true;
            for (i, (g, &op)) in geoms.iter().zip(&ops).enumerate() {
                match g.transpose_out(side, op) {
                    Some(s) => side = s,
                    None => {
                        ok = false;
                        break;
                    }
                }
                if mirror(i) == Some(side) {
                    matches += 1;
                }
            }
            if !ok {
                continue;
            }
            let score = (side == target, matches);
            if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
                best = Some((score, ops, side));
            }
        }
        let (_, ops, side) = best.ok_or_else(|| {
            CaeError::ShapeMismatch("decoder cannot produce a non-empty output".into())
        })?;
        let mut it = ops.into_iter();
        for layer in &mut self.decoder_layers {
            if let LayerConfig::ConvTranspose2D { output_padding, .. } = layer {
                *output_padding = it.next().unwrap();
            }
        }
        self.raw_output_side = Some(side);
        Ok(())
    }

    /// Shapes of the trainable tensors, in model order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers().enumerate() {
            match *layer {
                LayerConfig::Conv2D {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => {
                    out.push((
                        format!("{i}.weight"),
                        vec![out_channels, in_channels, kernel, kernel],
                    ));
                    out.push((format!("{i}.bias"), vec![out_channels]));
                }
                LayerConfig::ConvTranspose2D {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => {
                    out.push((
                        format!("{i}.weight"),
                        vec![in_channels, out_channels, kernel, kernel],
                    ));
                    out.push((format!("{i}.bias"), vec![out_channels]));
                }
                LayerConfig::BatchNorm2D { channels, .. } => {
                    out.push((format!("{i}.gamma"), vec![channels]));
                    out.push((format!("{i}.beta"), vec![channels]));
                }
                LayerConfig::Linear {
                    in_features,
                    out_features,
                } => {
                    out.push((format!("{i}.weight"), vec![out_features, in_features]));
                    out.push((format!("{i}.bias"), vec![out_features]));
                }
                _ => {}
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// `(1, 2, n, n)` tensor holding `Re ρ` and `Im ρ`.
pub fn encode_state<T: Real>(rho: &DensityMatrix) -> Tensor<T> {
    encode_batch(std::slice::from_ref(rho)).expect("single state")
}

/// Stacks states of equal size into an `(N, 2, n, n)` batch.
pub fn encode_batch<T: Real>(states: &[DensityMatrix]) -> Result<Tensor<T>, CaeError> {
    let n = states.first().map_or(0, DensityMatrix::side);
    let mut data = Vec::with_capacity(states.len() * 2 * n * n);
    for rho in states {
        if rho.side() != n {
            return Err(CaeError::ShapeMismatch(format!(
                "batch mixes sides {n} and {}",
                rho.side()
            )));
        }
        let m = rho.matrix().as_slice();
        data.extend(m.iter().map(|z| T::from_f64(z.re)));
        data.extend(m.iter().map(|z| T::from_f64(z.im)));
    }
    Ok(Tensor::from_vec(&[states.len(), 2, n, n], data)?)
}

/// Inverse of [`encode_state`] for one `(1, 2, n, n)` output. The result is
/// not forced to be a density matrix.
pub fn decode_output<T: Real>(t: &Tensor<T>) -> Result<ComplexMatrix, CaeError> {
    match *t.shape() {
        [1, 2, n, m] if n == m => Ok(decode_sample(t.data(), n)?),
        ref s => Err(CaeError::ShapeMismatch(format!(
            "expected (1, 2, n, n), got {s:?}"
        ))),
    }
}

/// Decodes one `2·n·n` slice (`Re` block then `Im` block).
pub fn decode_sample<T: Real>(data: &[T], n: usize) -> Result<ComplexMatrix, LinalgError> {
    let re: Vec<f64> = data[..n * n].iter().map(|v| v.to_f64()).collect();
    let im: Vec<f64> = data[n * n..2 * n * n].iter().map(|v| v.to_f64()).collect();
    ComplexMatrix::from_parts(n, n, &re, &im)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch-norm running statistics of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Output of [`CaeModel::build`].
pub struct Forward<T> {
    pub output: Var,
    /// Graph handles of the model parameters, in [`CaeModel::params`] order.
    pub params: Vec<Var>,
    stats: Vec<(usize, BatchStats<T>)>,
}

/// Autoencoder parameters and batch-norm state for one architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct CaeModel<T> {
    spec: ArchitectureSpec,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    /// Indexed by layer position; `Some` for batch-norm layers.
    running: Vec<Option<RunningStats<T>>>,
}

impl<T: Real> CaeModel<T> {
    /// Fresh model with Kaiming-uniform weights drawn from `seed`.
    pub fn new(spec: ArchitectureSpec, seed: u64) -> Result<Self, CaeError> {
        let mut spec = spec;
        if spec.raw_output_side.is_none() {
            spec.resolve_shapes()?;
        }
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gain = (2.0 / (1.0 + INIT_SLOPE * INIT_SLOPE)).sqrt();
        let mut names = Vec::new();
        let mut params = Vec::new();
        let layers: Vec<&LayerConfig> = spec.layers().collect();
        for (name, shape) in spec.param_shapes() {
            let n: usize = shape.iter().product();
            let data: Vec<T> = if name.ends_with("weight") {
                // Inputs feeding one output: C_in·k·k. Transposed-conv weights
                // are stored (C_in, C_out, k, k).
                let layer = name
                    .split('.')
                    .next()
                    .and_then(|i| i.parse::<usize>().ok())
                    .and_then(|i| layers.get(i));
                let fan_in: usize = match layer {
                    Some(LayerConfig::ConvTranspose2D { .. }) => {
                        shape[0] * shape[2..].iter().product::<usize>()
                    }
                    _ => shape[1..].iter().product(),
                };
                let bound = gain * (3.0 / fan_in as f64).sqrt();
                (0..n)
                    .map(|_| T::from_f64(rng.random_range(-bound..=bound)))
                    .collect()
            } else if name.ends_with("gamma") {
                vec![T::ONE; n]
            } else {
                vec![T::ZERO; n]
            };
            names.push(name);
            params.push(Tensor::from_vec(&shape, data)?);
        }
        let running = spec
            .layers()
            .map(|l| match *l {
                LayerConfig::BatchNorm2D { channels, .. } => Some(RunningStats {
                    mean: vec![T::ZERO; channels],
                    var: vec![T::ONE; channels],
                }),
                _ => None,
            })
            .collect();
        Ok(Self {
            spec,
            names,
            params,
            running,
        })
    }

    /// Reassembles a model from stored parts, checking every shape.
    pub fn from_parts(
        spec: ArchitectureSpec,
        params: Vec<Tensor<T>>,
        running: Vec<RunningStats<T>>,
    ) -> Result<Self, CaeError> {
        let mut model = Self::new(spec, 0)?;
        if params.len() != model.params.len() {
            return Err(CaeError::UninitializedParameters(format!(
                "expected {} parameter tensors, got {}",
                model.params.len(),
                params.len()
            )));
        }
        for (i, (have, want)) in params.iter().zip(&model.params).enumerate() {
            if have.shape() != want.shape() || !have.all_finite() {
                return Err(CaeError::UninitializedParameters(format!(
                    "{}: shape {:?}, expected {:?}",
                    model.names[i],
                    have.shape(),
                    want.shape()
                )));
            }
        }
        model.params = params;
        let slots: Vec<&mut Option<RunningStats<T>>> =
            model.running.iter_mut().filter(|r| r.is_some()).collect();
        if slots.len() != running.len() {
            return Err(CaeError::UninitializedParameters(
                "batch-norm statistics count mismatch".into(),
            ));
        }
        for (slot, stats) in slots.into_iter().zip(running) {
            let cur = slot.as_ref().unwrap();
            if cur.mean.len() != stats.mean.len() || cur.var.len() != stats.var.len() {
                return Err(CaeError::UninitializedParameters(
                    "batch-norm statistics shape mismatch".into(),
                ));
            }
            *slot = Some(stats);
        }
        Ok(model)
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    /// Running statistics of every batch-norm layer, in model order.
    pub fn running_stats(&self) -> Vec<&RunningStats<T>> {
        self.running.iter().flatten().collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> CaeModel<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::from_f64(x.to_f64())).collect();
        CaeModel {
            spec: self.spec.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            running: self
                .running
                .iter()
                .map(|r| {
                    r.as_ref().map(|r| RunningStats {
                        mean: conv(&r.mean),
                        var: conv(&r.var),
                    })
                })
                .collect(),
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<(), CaeError> {
        let n = self.spec.input_side();
        match *shape {
            [_, 2, h, w] if h == n && w == n => Ok(()),
            ref s => Err(CaeError::ShapeMismatch(format!(
                "expected (N, 2, {n}, {n}), got {s:?}"
            ))),
        }
    }

    /// Records the forward pass of `x` on `g`. Parameters become trainable
    /// leaves when `trainable` is set, constants otherwise. Batch statistics
    /// from training mode are returned for [`CaeModel::apply_batch_stats`].
    pub fn build<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        x: Var,
        mode: Mode,
        trainable: bool,
        rng: &mut R,
    ) -> Result<Forward<T>, CaeError> {
        self.check_input(g.value(x).shape())?;
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    g.param(p.clone())
                } else {
                    g.input(p.clone())
                }
            })
            .collect();
        let train = mode == Mode::Train;
        let mut next = params.iter().copied();
        let mut h = x;
        let mut stats = Vec::new();
        for (li, layer) in self.spec.layers().enumerate() {
            h = match *layer {
                LayerConfig::Conv2D { .. } => {
                    let (w, b) = (next.next().unwrap(), next.next().unwrap());
                    g.conv2d(h, w, Some(b), layer.geom().unwrap())?
                }
                LayerConfig::ConvTranspose2D { output_padding, .. } => {
                    let (w, b) = (next.next().unwrap(), next.next().unwrap());
                    g.conv_transpose2d(h, w, Some(b), layer.geom().unwrap(), output_padding)?
                }
                LayerConfig::BatchNorm2D { epsilon, .. } => {
                    let (gamma, beta) = (next.next().unwrap(), next.next().unwrap());
                    let eps = T::from_f64(epsilon);
                    if train {
                        let (y, s) = g.batch_norm_train(h, gamma, beta, eps)?;
                        stats.push((li, s));
                        y
                    } else {
                        let r = self.running[li]
                            .as_ref()
                            .expect("batch-norm layer has statistics");
                        g.batch_norm_eval(h, gamma, beta, &r.mean, &r.var, eps)?
                    }
                }
                LayerConfig::Dropout2D { rate } => g.dropout2d(h, rate, train, rng)?,
                LayerConfig::LeakyReLU { negative_slope } => {
                    g.leaky_relu(h, T::from_f64(negative_slope))
                }
                LayerConfig::GELU => g.gelu(h),
                LayerConfig::Linear { .. } | LayerConfig::Softmax => {
                    return Err(CaeError::InvalidSpec(
                        "dense layers are not supported in an autoencoder".into(),
                    ))
                }
            };
        }
        let output = self.fit_output(g, h)?;
        Ok(Forward {
            output,
            params,
            stats,
        })
    }

    /// Center-crops or zero-pads the decoder output to `d²` when the solved
    /// architecture does not land there exactly.
    fn fit_output(&self, g: &mut Graph<T>, h: Var) -> Result<Var, CaeError> {
        let target = self.spec.input_side();
        let [n, c, side, _] = match *g.value(h).shape() {
            [n, c, a, b] if a == b => [n, c, a, b],
            ref s => {
                return Err(CaeError::ShapeMismatch(format!(
                    "decoder output {s:?} is not square"
                )))
            }
        };
        if side == target {
            return Ok(h);
        }
        let zero = g.input(Tensor::zeros(&[1]));
        let src = g.concat(&[h, zero], &[n * c * side * side + 1])?;
        let zero_idx = n * c * side * side;
        let off = side as isize / 2 - target as isize / 2;
        let mut idx = Vec::with_capacity(n * c * target * target);
        for plane in 0..n * c {
            for y in 0..target {
                for x in 0..target {
                    let (sy, sx) = (y as isize + off, x as isize + off);
                    idx.push(
                        if sy >= 0 && sx >= 0 && (sy as usize) < side && (sx as usize) < side {
                            plane * side * side + sy as usize * side + sx as usize
                        } else {
                            zero_idx
                        },
                    );
                }
            }
        }
        Ok(g.gather(src, idx, &[n, c, target, target])?)
    }

    /// Folds training-mode batch statistics into the running estimates.
    pub fn apply_batch_stats(&mut self, fwd: &Forward<T>) {
        for (li, s) in &fwd.stats {
            let momentum = match self.spec.layers().nth(*li) {
                Some(LayerConfig::BatchNorm2D { momentum, .. }) => T::from_f64(*momentum),
                _ => continue,
            };
            let r = self.running[*li]
                .as_mut()
                .expect("batch-norm layer has statistics");
            for (rm, &m) in r.mean.iter_mut().zip(&s.mean) {
                *rm = (T::ONE - momentum) * *rm + momentum * m;
            }
            for (rv, &v) in r.var.iter_mut().zip(&s.var_unbiased) {
                *rv = (T::ONE - momentum) * *rv + momentum * v;
            }
        }
    }

    /// Runs a batch through the network. Training mode updates the running
    /// statistics.
    pub fn forward<R: Rng + ?Sized>(
        &mut self,
        batch: &Tensor<T>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Tensor<T>, CaeError> {
        let mut g = Graph::new();
        let x = g.input(batch.clone());
        let fwd = self.build(&mut g, x, mode, false, rng)?;
        if mode == Mode::Train {
            self.apply_batch_stats(&fwd);
        }
        Ok(g.value(fwd.output).clone())
    }

    /// Deterministic eval-mode forward pass.
    pub fn infer(&self, batch: &Tensor<T>) -> Result<Tensor<T>, CaeError> {
        let mut g = Graph::new();
        let x = g.input(batch.clone());
        // Eval mode never draws from the generator.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fwd = self.build(&mut g, x, Mode::Eval, false, &mut rng)?;
        Ok(g.value(fwd.output).clone())
    }

    /// Per-sample mean absolute reconstruction error, in eval mode.
    pub fn reconstruction_errors(&self, batch: &Tensor<T>) -> Result<Vec<f64>, CaeError> {
        let out = self.infer(batch)?;
        let per = batch.len() / batch.shape()[0].max(1);
        Ok(batch
            .data()
            .chunks(per)
            .zip(out.data().chunks(per))
            .map(|(a, b)| {
                let s: f64 = a
                    .iter()
                    .zip(b)
                    .map(|(p, q)| (p.to_f64() - q.to_f64()).abs())
                    .sum();
                s / per as f64
            })
            .collect())
    }
}
