//! Cascaded CNN with interleaved data consistency, optionally carrying an
//! anatomy-specific instance-normalization bank.
//!
//! Each of the `cascades` blocks is `conv → [norm] → ReLU` four times, a final
//! conv back to two channels, and a residual connection from the block
//! input. Every block is followed by a data-consistency step. With the bank
//! present, the normalization after conv layers 1–4 shares its statistics
//! across anatomies and picks the affine pair of the current anatomy.
//!
//! Gradients are computed by a hand-written reverse pass over a [`Tape`];
//! only tensors flagged as wanted get gradient buffers.

mod conv;
mod norm;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kspace::{self, CenteredFft, DcMode, ImageTensor, KSpaceTensor, SamplingMask};
use crate::phantom_data::valid_name;
use crate::scalar::Real;

pub use norm::{aspin_forward, instance_norm, instance_norm_backward, AspinBank, NormCache};

/// `C×H×W` feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct Activation<T = f32> {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Real> Activation<T> {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "activation {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Activation {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }
}

/// Where the distillation trace is taken within a conv layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TracePoint {
    /// After conv (+ normalization when present), before ReLU.
    #[default]
    PreActivation,
    /// After ReLU. Identical to `PreActivation` for the last layer.
    PostActivation,
}

/// Which activation a forward pass records per cascade.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceSpec {
    /// 1-based conv layer index.
    pub layer: usize,
    pub point: TracePoint,
}

impl Default for TraceSpec {
    fn default() -> Self {
        TraceSpec {
            layer: 3,
            point: TracePoint::PreActivation,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub name: String,
    pub cascades: usize,
    pub conv_layers: usize,
    pub features: usize,
    pub image_channels: usize,
    pub kernel_size: usize,
    /// Variance floor inside the normalization.
    pub eps: f64,
    pub dc: DcMode,
}

impl Default for Architecture {
    fn default() -> Self {
        Self::d5c5()
    }
}

impl Architecture {
    /// Five cascades of five 3×3 conv layers, 32 features, hard DC.
    pub fn d5c5() -> Self {
        Architecture {
            name: "d5c5".into(),
            cascades: 5,
            conv_layers: 5,
            features: 32,
            image_channels: 2,
            kernel_size: conv::KERNEL,
            eps: 1e-5,
            dc: DcMode::Hard,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "d5c5" => Ok(Self::d5c5()),
            other => Err(Error::InvalidArgument(format!("unknown architecture `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_size != conv::KERNEL {
            return Err(Error::InvalidArgument(format!(
                "only {0}x{0} kernels are supported",
                conv::KERNEL
            )));
        }
        if self.cascades == 0 || self.conv_layers < 2 || self.features == 0 {
            return Err(Error::InvalidArgument(format!("degenerate architecture {self:?}")));
        }
        if self.image_channels != 2 {
            return Err(Error::InvalidArgument("images are two-channel (re, im)".into()));
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::InvalidArgument(format!("eps must be > 0, got {}", self.eps)));
        }
        self.dc.validate()
    }

    /// `(in, out)` channels of 0-based conv layer `l`.
    pub fn layer_channels(&self, l: usize) -> (usize, usize) {
        let cin = if l == 0 { self.image_channels } else { self.features };
        let cout = if l + 1 == self.conv_layers {
            self.image_channels
        } else {
            self.features
        };
        (cin, cout)
    }

    /// Normalization sites: after every conv layer but the last, in every cascade.
    pub fn norm_sites(&self) -> usize {
        self.cascades * (self.conv_layers - 1)
    }

    pub fn site(&self, cascade: usize, layer: usize) -> usize {
        cascade * (self.conv_layers - 1) + layer
    }

    pub fn base_parameter_count(&self) -> usize {
        let k = self.kernel_size * self.kernel_size;
        let per_cascade: usize = (0..self.conv_layers)
            .map(|l| {
                let (cin, cout) = self.layer_channels(l);
                k * cin * cout + cout
            })
            .sum();
        per_cascade * self.cascades
    }

    pub fn per_anatomy_parameter_count(&self) -> usize {
        2 * self.norm_sites() * self.features
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamScope {
    /// Shared conv weights and biases.
    Base,
    /// One anatomy's affine set (0 without a bank).
    PerAnatomy,
    Total,
}

#[derive(Clone, Debug, PartialEq)]
struct ConvParams<T> {
    cin: usize,
    cout: usize,
    weight: Vec<T>,
    bias: Vec<T>,
}

/// Which tensor a flat parameter index refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    ConvWeight { cascade: usize, layer: usize },
    ConvBias { cascade: usize, layer: usize },
    Gamma { anatomy: usize },
    Beta { anatomy: usize },
}

/// Flat gradient buffers aligned with the model's tensor indices.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    slots: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, index: usize) -> Option<&[T]> {
        self.slots.get(index).and_then(|s| s.as_deref())
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn computed(&self) -> impl Iterator<Item = (usize, &[T])> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.as_deref().map(|g| (i, g)))
    }

    /// `self += other * scale`, slot by slot.
    pub fn accumulate(&mut self, other: &Gradients<T>, scale: T) {
        if self.slots.len() < other.slots.len() {
            self.slots.resize(other.slots.len(), None);
        }
        for (dst, src) in self.slots.iter_mut().zip(&other.slots) {
            if let Some(src) = src {
                let dst = dst.get_or_insert_with(|| vec![T::zero(); src.len()]);
                dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s * scale);
            }
        }
    }

    pub fn set(&mut self, index: usize, grad: Vec<T>) {
        self.slots[index] = Some(grad);
    }

    fn slot(&mut self, index: usize, len: usize) -> &mut [T] {
        self.slots[index].get_or_insert_with(|| vec![T::zero(); len])
    }

    pub fn empty(len: usize) -> Self {
        Gradients {
            slots: vec![None; len],
        }
    }
}

/// Cached values of one block's forward pass.
#[derive(Clone, Debug)]
pub struct BlockTape<T> {
    input: Vec<T>,
    /// Post-ReLU outputs of conv layers `0..L-1`.
    acts: Vec<Vec<T>>,
    norms: Vec<NormCache<T>>,
    trace: Option<Vec<T>>,
}

/// Everything the reverse pass needs from one full forward pass.
#[derive(Clone, Debug)]
pub struct Tape<T> {
    height: usize,
    width: usize,
    anatomy: Option<usize>,
    trace: Option<TraceSpec>,
    columns: Vec<bool>,
    blocks: Vec<BlockTape<T>>,
    output: ImageTensor<T>,
}

impl<T: Real> Tape<T> {
    pub fn output(&self) -> &ImageTensor<T> {
        &self.output
    }

    /// Recorded activation of every cascade, when tracing was requested.
    pub fn traces(&self) -> Option<Vec<Activation<T>>> {
        let spec = self.trace?;
        self.blocks
            .iter()
            .map(|b| b.trace.clone().map(|d| (spec, d)))
            .collect::<Option<Vec<_>>>()
            .map(|v| {
                v.into_iter()
                    .map(|(_, d)| {
                        let c = d.len() / (self.height * self.width);
                        Activation::new(c, self.height, self.width, d).expect("trace shape")
                    })
                    .collect()
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CascadeModel<T: Real = f32> {
    arch: Architecture,
    convs: Vec<ConvParams<T>>,
    bank: Option<AspinBank<T>>,
    trainable: Vec<bool>,
}

impl<T: Real> CascadeModel<T> {
    /// Plain network (no normalization bank), Kaiming-uniform weights, zero biases.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        let mut model = Self::zeroed::<&str>(arch, false, &[])?;
        model.init_weights(seed);
        Ok(model)
    }

    /// Network with a bank holding one identity affine set per anatomy.
    pub fn universal<S: AsRef<str>>(arch: Architecture, anatomies: &[S], seed: u64) -> Result<Self> {
        let mut model = Self::zeroed(arch, true, anatomies)?;
        model.init_weights(seed);
        Ok(model)
    }

    /// All-zero conv weights; bank sets at identity. Used when loading.
    pub fn zeroed<S: AsRef<str>>(arch: Architecture, aspin: bool, anatomies: &[S]) -> Result<Self> {
        arch.validate()?;
        let k = arch.kernel_size * arch.kernel_size;
        let convs = (0..arch.cascades * arch.conv_layers)
            .map(|i| {
                let (cin, cout) = arch.layer_channels(i % arch.conv_layers);
                ConvParams {
                    cin,
                    cout,
                    weight: vec![T::zero(); cout * cin * k],
                    bias: vec![T::zero(); cout],
                }
            })
            .collect::<Vec<_>>();
        let trainable = vec![true; 2 * convs.len()];
        let mut model = CascadeModel {
            bank: aspin.then(|| AspinBank::new(arch.features, arch.norm_sites())),
            arch,
            convs,
            trainable,
        };
        if !aspin && !anatomies.is_empty() {
            return Err(Error::InvalidArgument(
                "anatomies can only be registered on a model with a normalization bank".into(),
            ));
        }
        for a in anatomies {
            model.add_anatomy(a.as_ref())?;
        }
        Ok(model)
    }

    fn init_weights(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = self.arch.kernel_size * self.arch.kernel_size;
        for c in &mut self.convs {
            let bound = (6.0 / (c.cin * k) as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound);
            for w in &mut c.weight {
                *w = T::of(dist.sample(&mut rng));
            }
            c.bias.fill(T::zero());
        }
    }

    /// Zeroes the last conv of every cascade, so each block starts as the
    /// identity and the whole network as repeated data consistency.
    pub fn zero_final_convs(&mut self) {
        let l = self.arch.conv_layers;
        for c in self.convs.iter_mut().skip(l - 1).step_by(l) {
            c.weight.fill(T::zero());
            c.bias.fill(T::zero());
        }
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn bank(&self) -> Option<&AspinBank<T>> {
        self.bank.as_ref()
    }

    pub fn bank_mut(&mut self) -> Option<&mut AspinBank<T>> {
        self.bank.as_mut()
    }

    pub fn anatomies(&self) -> &[String] {
        self.bank.as_ref().map(|b| b.registry()).unwrap_or(&[])
    }

    pub fn anatomy_index(&self, name: &str) -> Result<usize> {
        match &self.bank {
            Some(b) => b.index_of(name),
            None => Err(Error::UnknownAnatomy(name.to_string())),
        }
    }

    /// Inserts an identity affine set for a new anatomy. Existing parameters
    /// are untouched.
    pub fn add_anatomy(&mut self, name: &str) -> Result<usize> {
        if !valid_name(name) {
            return Err(Error::InvalidArgument(format!(
                "anatomy name `{name}` must be non-empty [A-Za-z0-9_-]"
            )));
        }
        let bank = self
            .bank
            .as_mut()
            .ok_or_else(|| Error::InvalidArgument("model has no normalization bank".into()))?;
        let idx = bank.push(name)?;
        self.trainable.extend([true, true]);
        Ok(idx)
    }

    pub fn count_parameters(&self, scope: ParamScope) -> usize {
        let base: usize = self.convs.iter().map(|c| c.weight.len() + c.bias.len()).sum();
        let per = self.bank.as_ref().map(|b| b.parameters_per_anatomy()).unwrap_or(0);
        match scope {
            ParamScope::Base => base,
            ParamScope::PerAnatomy => per,
            ParamScope::Total => {
                base + self
                    .bank
                    .as_ref()
                    .map(|b| b.gammas().iter().chain(b.betas()).map(Vec::len).sum())
                    .unwrap_or(0)
            }
        }
    }

    /// Number of named tensors (conv weight/bias pairs, then γ/β per anatomy).
    pub fn tensor_count(&self) -> usize {
        2 * self.convs.len() + 2 * self.anatomies().len()
    }

    pub fn param_kind(&self, index: usize) -> ParamKind {
        let nconv = 2 * self.convs.len();
        if index < nconv {
            let (cascade, layer) = (index / 2 / self.arch.conv_layers, index / 2 % self.arch.conv_layers);
            if index % 2 == 0 {
                ParamKind::ConvWeight { cascade, layer }
            } else {
                ParamKind::ConvBias { cascade, layer }
            }
        } else {
            let anatomy = (index - nconv) / 2;
            if (index - nconv) % 2 == 0 {
                ParamKind::Gamma { anatomy }
            } else {
                ParamKind::Beta { anatomy }
            }
        }
    }

    pub fn param_name(&self, index: usize) -> String {
        match self.param_kind(index) {
            ParamKind::ConvWeight { cascade, layer } => {
                format!("cascade{}.conv{}.weight", cascade + 1, layer + 1)
            }
            ParamKind::ConvBias { cascade, layer } => {
                format!("cascade{}.conv{}.bias", cascade + 1, layer + 1)
            }
            ParamKind::Gamma { anatomy } => format!("aspin.{}.gamma", self.anatomies()[anatomy]),
            ParamKind::Beta { anatomy } => format!("aspin.{}.beta", self.anatomies()[anatomy]),
        }
    }

    pub fn param_shape(&self, index: usize) -> Vec<usize> {
        let k = self.arch.kernel_size;
        match self.param_kind(index) {
            ParamKind::ConvWeight { cascade, layer } => {
                let c = &self.convs[cascade * self.arch.conv_layers + layer];
                vec![c.cout, c.cin, k, k]
            }
            ParamKind::ConvBias { cascade, layer } => {
                vec![self.convs[cascade * self.arch.conv_layers + layer].cout]
            }
            ParamKind::Gamma { .. } | ParamKind::Beta { .. } => {
                vec![self.arch.norm_sites(), self.arch.features]
            }
        }
    }

    pub fn param(&self, index: usize) -> &[T] {
        let nconv = 2 * self.convs.len();
        if index < nconv {
            let c = &self.convs[index / 2];
            if index % 2 == 0 {
                &c.weight
            } else {
                &c.bias
            }
        } else {
            let bank = self.bank.as_ref().expect("bank index without bank");
            let a = (index - nconv) / 2;
            if (index - nconv) % 2 == 0 {
                &bank.gammas()[a]
            } else {
                &bank.betas()[a]
            }
        }
    }

    pub fn param_mut(&mut self, index: usize) -> &mut [T] {
        let nconv = 2 * self.convs.len();
        if index < nconv {
            let c = &mut self.convs[index / 2];
            if index % 2 == 0 {
                &mut c.weight
            } else {
                &mut c.bias
            }
        } else {
            let bank = self.bank.as_mut().expect("bank index without bank");
            let a = (index - nconv) / 2;
            if (index - nconv) % 2 == 0 {
                &mut bank.gammas_mut()[a]
            } else {
                &mut bank.betas_mut()[a]
            }
        }
    }

    /// Flat indices of the γ and β tensors of `anatomy`.
    pub fn anatomy_param_indices(&self, anatomy: usize) -> [usize; 2] {
        let base = 2 * self.convs.len() + 2 * anatomy;
        [base, base + 1]
    }

    pub fn base_param_indices(&self) -> std::ops::Range<usize> {
        0..2 * self.convs.len()
    }

    pub fn is_trainable(&self, index: usize) -> bool {
        self.trainable[index]
    }

    pub fn set_trainable(&mut self, index: usize, flag: bool) {
        self.trainable[index] = flag;
    }

    pub fn trainable_flags(&self) -> &[bool] {
        &self.trainable
    }

    /// Same parameters in another precision.
    pub fn cast<U: Real>(&self) -> CascadeModel<U> {
        let cv = |v: &[T]| v.iter().map(|x| U::of(x.as_f64())).collect::<Vec<U>>();
        CascadeModel {
            arch: self.arch.clone(),
            convs: self
                .convs
                .iter()
                .map(|c| ConvParams {
                    cin: c.cin,
                    cout: c.cout,
                    weight: cv(&c.weight),
                    bias: cv(&c.bias),
                })
                .collect(),
            bank: self.bank.as_ref().map(|b| b.cast()),
            trainable: self.trainable.clone(),
        }
    }

    fn resolve_anatomy(&self, anatomy: Option<usize>) -> Result<Option<usize>> {
        match (&self.bank, anatomy) {
            (None, _) => Ok(None),
            (Some(_), None) => Err(Error::InvalidArgument(
                "a model with a normalization bank needs an anatomy".into(),
            )),
            (Some(b), Some(a)) if a < b.len() => Ok(Some(a)),
            (Some(_), Some(a)) => Err(Error::UnknownAnatomy(format!("#{a}"))),
        }
    }

    fn check_trace(&self, trace: Option<TraceSpec>) -> Result<()> {
        match trace {
            Some(t) if t.layer == 0 || t.layer > self.arch.conv_layers => Err(Error::InvalidArgument(
                format!("trace layer {} outside 1..={}", t.layer, self.arch.conv_layers),
            )),
            _ => Ok(()),
        }
    }

    /// One conv block on a raw `2×H×W` buffer; returns the tape and the
    /// residual output (before data consistency).
    fn block_forward_raw(
        &self,
        cascade: usize,
        input: &[T],
        h: usize,
        w: usize,
        anatomy: Option<usize>,
        trace: Option<TraceSpec>,
    ) -> (BlockTape<T>, Vec<T>) {
        let l_count = self.arch.conv_layers;
        let hw = h * w;
        let mut col = Vec::new();
        let mut acts: Vec<Vec<T>> = Vec::with_capacity(l_count - 1);
        let mut norms = Vec::new();
        let mut traced = None;
        for l in 0..l_count - 1 {
            let c = &self.convs[cascade * l_count + l];
            let src = if l == 0 { input } else { &acts[l - 1] };
            let z = conv::conv_forward(src, c.cin, c.cout, h, w, &c.weight, &c.bias, &mut col);
            let p = match (&self.bank, anatomy) {
                (Some(bank), Some(a)) => {
                    let site = self.arch.site(cascade, l);
                    let cache = norm::normalize(&z, c.cout, hw, self.arch.eps);
                    let p = norm::affine(
                        &cache,
                        bank.gamma(a, site).expect("checked anatomy"),
                        bank.beta(a, site).expect("checked anatomy"),
                        hw,
                    );
                    norms.push(cache);
                    p
                }
                _ => z,
            };
            let a: Vec<T> = p.iter().map(|&v| v.max(T::zero())).collect();
            if let Some(t) = trace.filter(|t| t.layer == l + 1) {
                traced = Some(match t.point {
                    TracePoint::PreActivation => p,
                    TracePoint::PostActivation => a.clone(),
                });
            }
            acts.push(a);
        }
        let c = &self.convs[cascade * l_count + l_count - 1];
        let z = conv::conv_forward(&acts[l_count - 2], c.cin, c.cout, h, w, &c.weight, &c.bias, &mut col);
        if trace.is_some_and(|t| t.layer == l_count) {
            traced = Some(z.clone());
        }
        let out: Vec<T> = input.iter().zip(&z).map(|(&x, &d)| x + d).collect();
        (
            BlockTape {
                input: input.to_vec(),
                acts,
                norms,
                trace: traced,
            },
            out,
        )
    }

    /// Reverse pass through one block. Returns the input gradient when
    /// `need_input_grad`.
    #[allow(clippy::too_many_arguments)]
    fn block_backward_raw(
        &self,
        cascade: usize,
        tape: &BlockTape<T>,
        h: usize,
        w: usize,
        anatomy: Option<usize>,
        trace: Option<TraceSpec>,
        grad_out: &[T],
        trace_grad: Option<&[T]>,
        want: &[bool],
        grads: &mut Gradients<T>,
        need_input_grad: bool,
    ) -> Option<Vec<T>> {
        let l_count = self.arch.conv_layers;
        let hw = h * w;
        let mut col = Vec::new();
        let trace_at = |l: usize| trace.filter(|t| t.layer == l + 1).and(trace_grad);

        let mut gz = grad_out.to_vec();
        if let Some(tg) = trace_at(l_count - 1) {
            gz.iter_mut().zip(tg).for_each(|(g, &t)| *g += t);
        }
        let mut g_act = self.conv_layer_backward(
            cascade,
            l_count - 1,
            &tape.acts[l_count - 2],
            &gz,
            h,
            w,
            want,
            grads,
            true,
            &mut col,
        );
        for l in (0..l_count - 1).rev() {
            let a = &tape.acts[l];
            let mut gp: Vec<T> = g_act
                .expect("hidden layers always propagate")
                .iter()
                .zip(a)
                .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                .collect();
            if let Some(tg) = trace_at(l) {
                let post = trace.is_some_and(|t| t.point == TracePoint::PostActivation);
                for ((g, &t), &v) in gp.iter_mut().zip(tg).zip(a) {
                    if !post || v > T::zero() {
                        *g += t;
                    }
                }
            }
            let gz = match (&self.bank, anatomy) {
                (Some(bank), Some(an)) => {
                    let site = self.arch.site(cascade, l);
                    let f = self.arch.features;
                    let [gi, bi] = self.anatomy_param_indices(an);
                    let total = self.arch.norm_sites() * f;
                    let mut gg = if want[gi] { Some(vec![T::zero(); f]) } else { None };
                    let mut gb = if want[bi] { Some(vec![T::zero(); f]) } else { None };
                    let dz = norm::affine_norm_backward(
                        &gp,
                        &tape.norms[l],
                        bank.gamma(an, site).expect("checked anatomy"),
                        hw,
                        gg.as_deref_mut(),
                        gb.as_deref_mut(),
                    );
                    if let Some(gg) = gg {
                        let slot = grads.slot(gi, total);
                        slot[site * f..(site + 1) * f]
                            .iter_mut()
                            .zip(&gg)
                            .for_each(|(d, &s)| *d += s);
                    }
                    if let Some(gb) = gb {
                        let slot = grads.slot(bi, total);
                        slot[site * f..(site + 1) * f]
                            .iter_mut()
                            .zip(&gb)
                            .for_each(|(d, &s)| *d += s);
                    }
                    dz
                }
                _ => gp,
            };
            let src = if l == 0 { &tape.input } else { &tape.acts[l - 1] };
            let need = l > 0 || need_input_grad;
            g_act = self.conv_layer_backward(cascade, l, src, &gz, h, w, want, grads, need, &mut col);
        }
        if !need_input_grad {
            return None;
        }
        let mut g_in = grad_out.to_vec();
        if let Some(g) = g_act {
            g_in.iter_mut().zip(&g).for_each(|(a, &b)| *a += b);
        }
        Some(g_in)
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_layer_backward(
        &self,
        cascade: usize,
        layer: usize,
        input: &[T],
        grad_out: &[T],
        h: usize,
        w: usize,
        want: &[bool],
        grads: &mut Gradients<T>,
        need_input_grad: bool,
        col: &mut Vec<T>,
    ) -> Option<Vec<T>> {
        let flat = cascade * self.arch.conv_layers + layer;
        let c = &self.convs[flat];
        let (wi, bi) = (2 * flat, 2 * flat + 1);
        if !want[wi] && !want[bi] && !need_input_grad {
            return None;
        }
        let mut gw = want[wi].then(|| grads.slot(wi, c.weight.len()).to_vec());
        let mut gb = want[bi].then(|| grads.slot(bi, c.bias.len()).to_vec());
        let g_in = conv::conv_backward(
            input,
            grad_out,
            c.cin,
            c.cout,
            h,
            w,
            &c.weight,
            conv::ConvGrads {
                weight: gw.as_deref_mut(),
                bias: gb.as_deref_mut(),
            },
            need_input_grad,
            col,
        );
        if let Some(gw) = gw {
            grads.slots[wi] = Some(gw);
        }
        if let Some(gb) = gb {
            grads.slots[bi] = Some(gb);
        }
        g_in
    }

    /// One conv block without data consistency. Returns the residual output
    /// and the activation recorded at `trace` (default: layer 3, pre-ReLU).
    pub fn cnn_block_forward(
        &self,
        x: &ImageTensor<T>,
        cascade: usize,
        anatomy: Option<usize>,
        trace: TraceSpec,
    ) -> Result<(ImageTensor<T>, Activation<T>)> {
        let (tape, out) = self.block_tape(x, cascade, anatomy, trace)?;
        let (h, w) = (x.height(), x.width());
        let tr = tape.trace.expect("trace requested");
        let c = tr.len() / (h * w);
        Ok((ImageTensor::new(h, w, out)?, Activation::new(c, h, w, tr)?))
    }

    /// Forward pass of a single block, keeping the tape for [`Self::block_backward`].
    pub fn block_tape(
        &self,
        x: &ImageTensor<T>,
        cascade: usize,
        anatomy: Option<usize>,
        trace: TraceSpec,
    ) -> Result<(BlockTape<T>, Vec<T>)> {
        if cascade >= self.arch.cascades {
            return Err(Error::InvalidArgument(format!("cascade {cascade} out of range")));
        }
        self.check_trace(Some(trace))?;
        let anatomy = self.resolve_anatomy(anatomy)?;
        Ok(self.block_forward_raw(cascade, x.data(), x.height(), x.width(), anatomy, Some(trace)))
    }

    /// Gradients of `Σ grad_out ⊙ block_output + Σ trace_grad ⊙ trace` for one block.
    #[allow(clippy::too_many_arguments)]
    pub fn block_backward(
        &self,
        tape: &BlockTape<T>,
        cascade: usize,
        height: usize,
        width: usize,
        anatomy: Option<usize>,
        trace: TraceSpec,
        grad_out: &[T],
        trace_grad: Option<&[T]>,
        want: &[bool],
    ) -> Result<(Vec<T>, Gradients<T>)> {
        let anatomy = self.resolve_anatomy(anatomy)?;
        let mut grads = Gradients::empty(self.tensor_count());
        let g = self
            .block_backward_raw(
                cascade,
                tape,
                height,
                width,
                anatomy,
                Some(trace),
                grad_out,
                trace_grad,
                want,
                &mut grads,
                true,
            )
            .expect("input gradient requested");
        Ok((g, grads))
    }

    fn check_inputs(&self, x_u: &ImageTensor<T>, y: &KSpaceTensor<T>, mask: &SamplingMask) -> Result<()> {
        let shape = (x_u.height(), x_u.width());
        if shape != (y.height(), y.width()) || shape != (mask.height(), mask.width()) {
            return Err(Error::Shape(format!(
                "input {:?}, k-space {:?}, mask {:?} disagree",
                shape,
                (y.height(), y.width()),
                (mask.height(), mask.width())
            )));
        }
        Ok(())
    }

    /// Full unrolled pass, recording what the reverse pass needs.
    pub fn forward_tape(
        &self,
        x_u: &ImageTensor<T>,
        y: &KSpaceTensor<T>,
        mask: &SamplingMask,
        anatomy: Option<usize>,
        trace: Option<TraceSpec>,
    ) -> Result<Tape<T>> {
        self.check_inputs(x_u, y, mask)?;
        self.check_trace(trace)?;
        let anatomy = self.resolve_anatomy(anatomy)?;
        let (h, w) = (x_u.height(), x_u.width());
        let fft = CenteredFft::new(h, w)?;
        let mut x = x_u.data().to_vec();
        let mut blocks = Vec::with_capacity(self.arch.cascades);
        for t in 0..self.arch.cascades {
            let (tape, mut out) = self.block_forward_raw(t, &x, h, w, anatomy, trace);
            kspace::dc_in_place(&fft, &mut out, y.data(), mask.columns(), self.arch.dc);
            blocks.push(tape);
            x = out;
        }
        Ok(Tape {
            height: h,
            width: w,
            anatomy,
            trace,
            columns: mask.columns().to_vec(),
            blocks,
            output: ImageTensor::new(h, w, x)?,
        })
    }

    pub fn forward(
        &self,
        x_u: &ImageTensor<T>,
        y: &KSpaceTensor<T>,
        mask: &SamplingMask,
        anatomy: Option<usize>,
    ) -> Result<ImageTensor<T>> {
        Ok(self.forward_tape(x_u, y, mask, anatomy, None)?.output)
    }

    /// Reverse pass. `grad_output` is `∂L/∂output` (2×H×W); `trace_grads`,
    /// when given, holds `∂L/∂trace` per cascade. Only tensors with
    /// `want[i]` receive gradients.
    pub fn backward(
        &self,
        tape: &Tape<T>,
        grad_output: &[T],
        trace_grads: Option<&[Vec<T>]>,
        want: &[bool],
    ) -> Result<Gradients<T>> {
        let (h, w) = (tape.height, tape.width);
        if grad_output.len() != 2 * h * w {
            return Err(Error::Shape("output gradient size".into()));
        }
        if want.len() != self.tensor_count() {
            return Err(Error::Shape(format!(
                "{} gradient flags for {} tensors",
                want.len(),
                self.tensor_count()
            )));
        }
        if let Some(tg) = trace_grads {
            if tape.trace.is_none() || tg.len() != self.arch.cascades {
                return Err(Error::Shape("trace gradients need a traced tape, one per cascade".into()));
            }
        }
        let fft = CenteredFft::new(h, w)?;
        let mut grads = Gradients::empty(self.tensor_count());
        let mut g = grad_output.to_vec();
        for t in (0..self.arch.cascades).rev() {
            kspace::dc_adjoint_in_place(&fft, &mut g, &tape.columns, self.arch.dc);
            let tg = trace_grads.map(|v| v[t].as_slice());
            match self.block_backward_raw(
                t,
                &tape.blocks[t],
                h,
                w,
                tape.anatomy,
                tape.trace,
                &g,
                tg,
                want,
                &mut grads,
                t > 0,
            ) {
                Some(next) => g = next,
                None => break,
            }
        }
        Ok(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kspace::{fft2c, make_gaussian_mask, undersample, zero_filled};

    fn tiny_arch() -> Architecture {
        Architecture {
            features: 4,
            ..Architecture::d5c5()
        }
    }

    fn phantom(h: usize, w: usize) -> ImageTensor<f64> {
        let v: Vec<f64> = (0..h * w)
            .map(|i| {
                let (r, c) = ((i / w) as f64, (i % w) as f64);
                0.5 + 0.3 * ((r * 0.7).sin() * (c * 0.4).cos())
            })
            .collect();
        ImageTensor::from_real(h, w, &v).unwrap()
    }

    #[test]
    fn d5c5_parameter_accounting() {
        let arch = Architecture::d5c5();
        let per_cascade = (9 * 2 * 32 + 32) + 3 * (9 * 32 * 32 + 32) + (9 * 32 * 2 + 2);
        assert_eq!(per_cascade, 28_930);
        assert_eq!(arch.base_parameter_count(), 144_650);
        assert_eq!(arch.per_anatomy_parameter_count(), 1_280);
        let m = CascadeModel::<f32>::new(arch.clone(), 0).unwrap();
        assert_eq!(m.count_parameters(ParamScope::Base), 144_650);
        assert_eq!(m.count_parameters(ParamScope::PerAnatomy), 0);
        let mut u = CascadeModel::<f32>::universal(arch, &["a", "b"], 0).unwrap();
        assert_eq!(u.count_parameters(ParamScope::PerAnatomy), 1_280);
        assert_eq!(u.count_parameters(ParamScope::Total), 144_650 + 2 * 1_280);
        u.add_anatomy("c").unwrap();
        assert_eq!(u.count_parameters(ParamScope::Total), 144_650 + 3 * 1_280);
    }

    #[test]
    fn parameter_names_and_shapes() {
        let m = CascadeModel::<f32>::universal(Architecture::d5c5(), &["brain"], 0).unwrap();
        assert_eq!(m.tensor_count(), 52);
        assert_eq!(m.param_name(0), "cascade1.conv1.weight");
        assert_eq!(m.param_shape(0), vec![32, 2, 3, 3]);
        assert_eq!(m.param_name(9), "cascade1.conv5.bias");
        assert_eq!(m.param_shape(9), vec![2]);
        assert_eq!(m.param_name(50), "aspin.brain.gamma");
        assert_eq!(m.param_shape(51), vec![20, 32]);
        let total: usize = (0..m.tensor_count()).map(|i| m.param(i).len()).sum();
        assert_eq!(total, m.count_parameters(ParamScope::Total));
    }

    #[test]
    fn add_anatomy_rules() {
        let mut plain = CascadeModel::<f32>::new(tiny_arch(), 0).unwrap();
        assert!(plain.add_anatomy("a").is_err());
        let mut u = CascadeModel::<f32>::universal(tiny_arch(), &["a"], 0).unwrap();
        assert!(matches!(u.add_anatomy("a"), Err(Error::DuplicateAnatomy(_))));
        assert!(u.add_anatomy("bad name").is_err());
        assert_eq!(u.add_anatomy("b").unwrap(), 1);
        assert_eq!(u.anatomy_index("b").unwrap(), 1);
        assert!(matches!(u.anatomy_index("zz"), Err(Error::UnknownAnatomy(_))));
    }

    #[test]
    fn bank_model_requires_registered_anatomy() {
        let u = CascadeModel::<f64>::universal(tiny_arch(), &["a"], 0).unwrap();
        let x = phantom(8, 8);
        let y = fft2c(&x).unwrap();
        let m = SamplingMask::full(8, 8);
        assert!(u.forward(&x, &y, &m, None).is_err());
        assert!(matches!(u.forward(&x, &y, &m, Some(1)), Err(Error::UnknownAnatomy(_))));
        assert!(u.forward(&x, &y, &m, Some(0)).is_ok());
    }

    #[test]
    fn zero_final_conv_makes_block_identity() {
        let mut m = CascadeModel::<f64>::new(tiny_arch(), 3).unwrap();
        for t in 0..5 {
            let idx = 2 * (t * 5 + 4);
            m.param_mut(idx).fill(0.0);
            m.param_mut(idx + 1).fill(0.0);
        }
        let x = phantom(8, 6);
        let (out, trace) = m.cnn_block_forward(&x, 0, None, TraceSpec::default()).unwrap();
        assert_eq!(out, x);
        assert_eq!(trace.shape(), [4, 8, 6]);

        // with nothing sampled, DC is a no-op and the whole model is identity
        let mask = SamplingMask::empty(8, 6);
        let y = undersample(&x, &mask).unwrap();
        assert_eq!(m.forward(&x, &y, &mask, None).unwrap(), x);
    }

    #[test]
    fn block_preserves_shape_for_small_images() {
        let m = CascadeModel::<f64>::new(tiny_arch(), 1).unwrap();
        for (h, w) in [(3, 3), (3, 7), (6, 4)] {
            let x = ImageTensor::new(h, w, vec![0.1; 2 * h * w]).unwrap();
            let (out, _) = m.cnn_block_forward(&x, 2, None, TraceSpec::default()).unwrap();
            assert_eq!((out.height(), out.width()), (h, w));
        }
    }

    #[test]
    fn full_mask_output_is_ground_truth() {
        let m = CascadeModel::<f64>::universal(tiny_arch(), &["a"], 9).unwrap();
        let gt = phantom(8, 8);
        let mask = SamplingMask::full(8, 8);
        let y = undersample(&gt, &mask).unwrap();
        let out = m.forward(&zero_filled(&y).unwrap(), &y, &mask, Some(0)).unwrap();
        for (a, b) in out.data().iter().zip(gt.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn output_satisfies_hard_dc() {
        let m = CascadeModel::<f64>::new(tiny_arch(), 2).unwrap();
        let gt = phantom(16, 16);
        let mask = make_gaussian_mask(16, 16, 4.0, 0.04, 1).unwrap();
        let y = undersample(&gt, &mask).unwrap();
        let out = m.forward(&zero_filled(&y).unwrap(), &y, &mask, None).unwrap();
        let k = fft2c(&out).unwrap();
        for (i, (a, b)) in k.data().iter().zip(y.data()).enumerate() {
            if mask.is_sampled(i % 16) {
                assert!((a - b).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn traces_one_per_cascade() {
        let m = CascadeModel::<f64>::universal(tiny_arch(), &["a"], 2).unwrap();
        let gt = phantom(8, 8);
        let mask = make_gaussian_mask(8, 8, 2.0, 0.1, 1).unwrap();
        let y = undersample(&gt, &mask).unwrap();
        let x = zero_filled(&y).unwrap();
        let tape = m.forward_tape(&x, &y, &mask, Some(0), Some(TraceSpec::default())).unwrap();
        let traces = tape.traces().unwrap();
        assert_eq!(traces.len(), 5);
        assert!(traces.iter().all(|t| t.shape() == [4, 8, 8]));
        let last = TraceSpec {
            layer: 5,
            point: TracePoint::PreActivation,
        };
        let tape = m.forward_tape(&x, &y, &mask, Some(0), Some(last)).unwrap();
        assert!(tape.traces().unwrap().iter().all(|t| t.channels() == 2));
        let bad = TraceSpec { layer: 6, ..last };
        assert!(m.forward_tape(&x, &y, &mask, Some(0), Some(bad)).is_err());
        assert!(m.forward_tape(&x, &y, &mask, Some(0), None).unwrap().traces().is_none());
    }

    #[test]
    fn cast_round_trip_is_exact_for_f32_values() {
        let m = CascadeModel::<f32>::universal(tiny_arch(), &["a", "b"], 4).unwrap();
        assert_eq!(m.cast::<f64>().cast::<f32>(), m);
    }
}
