//! Learned and linear patch descriptors.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{put_f32s, put_u32, Reader};
use crate::error::{Error, Result};
use crate::nn::{train, CaeWidths, Layer, LayerKind, Network, Scalar, TrainConfig, TrainReport};
use crate::patch::{Patch, PATCH_LEN, PATCH_PIXELS, PATCH_SIZE};
use crate::pca::{pca_fit, Pca};

pub type Descriptor = Vec<f32>;

const MAGIC: &[u8; 4] = b"PVRG";
const VERSION: u32 = 1;
const ENCODE_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegressorKind {
    Pca,
    Ae,
    Cae,
}

impl RegressorKind {
    fn code(self) -> u8 {
        match self {
            RegressorKind::Pca => 0,
            RegressorKind::Ae => 1,
            RegressorKind::Cae => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(RegressorKind::Pca),
            1 => Some(RegressorKind::Ae),
            2 => Some(RegressorKind::Cae),
            _ => None,
        }
    }
}

impl std::str::FromStr for RegressorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pca" => Ok(RegressorKind::Pca),
            "ae" => Ok(RegressorKind::Ae),
            "cae" => Ok(RegressorKind::Cae),
            _ => Err(Error::InvalidParameter(format!(
                "unknown regressor kind {s:?}"
            ))),
        }
    }
}

impl std::fmt::Display for RegressorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RegressorKind::Pca => "pca",
            RegressorKind::Ae => "ae",
            RegressorKind::Cae => "cae",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegressorSpec {
    pub kind: RegressorKind,
    pub feature_dim: usize,
    /// Width of the two outer fully-connected layers of the AE.
    pub ae_hidden: usize,
    pub cae_conv1: usize,
    pub cae_conv2: usize,
    pub cae_conv3: usize,
    pub cae_conv4: usize,
}

impl Default for RegressorSpec {
    fn default() -> Self {
        let w = CaeWidths::default();
        Self {
            kind: RegressorKind::Cae,
            feature_dim: 32,
            ae_hidden: 1024,
            cae_conv1: w.conv1,
            cae_conv2: w.conv2,
            cae_conv3: w.conv3,
            cae_conv4: w.conv4,
        }
    }
}

impl RegressorSpec {
    pub fn new(kind: RegressorKind, feature_dim: usize) -> Self {
        Self {
            kind,
            feature_dim,
            ..Self::default()
        }
    }

    pub fn cae_widths(&self) -> CaeWidths {
        CaeWidths {
            conv1: self.cae_conv1,
            conv2: self.cae_conv2,
            conv3: self.cae_conv3,
            conv4: self.cae_conv4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let widths = [
            self.ae_hidden,
            self.cae_conv1,
            self.cae_conv2,
            self.cae_conv3,
            self.cae_conv4,
        ];
        if self.feature_dim == 0 || self.feature_dim > PATCH_LEN || widths.contains(&0) {
            return Err(Error::InvalidParameter(format!(
                "invalid regressor dimensions in {self:?}"
            )));
        }
        Ok(())
    }

    /// Freshly initialized, untrained regressor.
    pub fn build(&self, seed: u64) -> Result<Regressor> {
        self.validate()?;
        let model = match self.kind {
            RegressorKind::Pca => Model::Pca(None),
            RegressorKind::Ae => {
                Model::Net(Network::autoencoder(self.feature_dim, self.ae_hidden, seed))
            }
            RegressorKind::Cae => Model::Net(Network::conv_autoencoder(
                self.feature_dim,
                self.cae_widths(),
                seed,
            )),
        };
        Ok(Regressor {
            kind: self.kind,
            feature_dim: self.feature_dim,
            model,
            trained: false,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Model {
    Pca(Option<PcaCodec>),
    Net(Network<f32>),
}

/// A PCA fit with single-precision copies of its parameters for encoding.
#[derive(Clone, Debug, PartialEq)]
struct PcaCodec {
    fit: Pca,
    mean: Vec<f32>,
    components: Vec<f32>,
}

impl PcaCodec {
    fn new(fit: Pca) -> Self {
        let narrow = |v: &[f64]| v.iter().map(|&x| x as f32).collect();
        Self {
            mean: narrow(&fit.mean),
            components: narrow(&fit.components),
            fit,
        }
    }
}

/// A descriptor regressor: PCA projection or autoencoder encoder half.
/// Immutable once trained; encoding takes `&self`.
#[derive(Clone, Debug, PartialEq)]
pub struct Regressor {
    kind: RegressorKind,
    feature_dim: usize,
    model: Model,
    trained: bool,
}

fn round_f32(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = *x as f32 as f64);
}

impl Regressor {
    /// PCA regressor on flattened patches. Parameters are rounded to `f32`
    /// so saving and loading is lossless.
    pub fn fit_pca(patches: &[Patch], feature_dim: usize) -> Result<Self> {
        let samples: Vec<Vec<f64>> = patches
            .iter()
            .map(|p| p.data.iter().map(|&v| v as f64).collect())
            .collect();
        let mut pca = pca_fit(&samples, feature_dim)?;
        round_f32(&mut pca.mean);
        round_f32(&mut pca.components);
        round_f32(&mut pca.variances);
        Ok(Self {
            kind: RegressorKind::Pca,
            feature_dim,
            model: Model::Pca(Some(PcaCodec::new(pca))),
            trained: true,
        })
    }

    /// Wraps explicit network weights; treated as trained.
    pub fn from_network(net: Network<f32>) -> Self {
        let kind = match net.kind() {
            crate::nn::NetKind::Autoencoder => RegressorKind::Ae,
            crate::nn::NetKind::ConvAutoencoder => RegressorKind::Cae,
        };
        Self {
            kind,
            feature_dim: net.feature_dim,
            model: Model::Net(net),
            trained: true,
        }
    }

    pub fn kind(&self) -> RegressorKind {
        self.kind
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn network(&self) -> Option<&Network<f32>> {
        match &self.model {
            Model::Net(n) => Some(n),
            Model::Pca(_) => None,
        }
    }

    pub fn pca(&self) -> Option<&Pca> {
        match &self.model {
            Model::Pca(p) => p.as_ref().map(|c| &c.fit),
            Model::Net(_) => None,
        }
    }

    /// SGD training of an autoencoder regressor.
    pub fn train(&mut self, patches: &[Patch], cfg: &TrainConfig) -> Result<TrainReport> {
        let Model::Net(net) = &mut self.model else {
            return Err(Error::InvalidParameter(
                "PCA regressors are fitted, not trained".into(),
            ));
        };
        let report = train(net, patches, cfg)?;
        self.trained = true;
        Ok(report)
    }

    fn check_trained(&self) -> Result<()> {
        if self.trained {
            Ok(())
        } else {
            Err(Error::State(format!(
                "{} regressor has not been trained",
                self.kind
            )))
        }
    }

    /// Descriptor and reconstruction of one patch.
    pub fn forward(&self, patch: &Patch) -> Result<(Descriptor, Vec<f32>)> {
        self.check_trained()?;
        check_len(patch)?;
        match &self.model {
            Model::Net(net) => Ok(net.forward(&patch.data)),
            Model::Pca(Some(p)) => {
                let code = self.encode(patch)?;
                let recon = p
                    .fit
                    .reconstruct(&code.iter().map(|&v| v as f64).collect::<Vec<_>>());
                Ok((code, recon.iter().map(|&v| v as f32).collect()))
            }
            Model::Pca(None) => unreachable!("trained PCA always has a fit"),
        }
    }

    pub fn encode(&self, patch: &Patch) -> Result<Descriptor> {
        Ok(self.encode_batch(std::slice::from_ref(patch))?.remove(0))
    }

    /// Encodes many patches, batching network evaluation.
    pub fn encode_batch(&self, patches: &[Patch]) -> Result<Vec<Descriptor>> {
        self.check_trained()?;
        let mut out = Vec::with_capacity(patches.len());
        match &self.model {
            Model::Net(net) => {
                let mut buf = Vec::with_capacity(ENCODE_CHUNK * PATCH_LEN);
                for chunk in patches.chunks(ENCODE_CHUNK) {
                    buf.clear();
                    for p in chunk {
                        check_len(p)?;
                        buf.extend_from_slice(&p.data);
                    }
                    let codes = net.encode_batch(&buf, chunk.len());
                    out.extend(codes.chunks_exact(self.feature_dim).map(<[f32]>::to_vec));
                }
            }
            Model::Pca(Some(p)) => {
                let (d, f) = (p.fit.dim, p.fit.feature_dim());
                let mut buf = Vec::with_capacity(ENCODE_CHUNK * d);
                let mut codes = vec![0.0f32; ENCODE_CHUNK * f];
                for chunk in patches.chunks(ENCODE_CHUNK) {
                    buf.clear();
                    for patch in chunk {
                        check_len(patch)?;
                        buf.extend(patch.data.iter().zip(&p.mean).map(|(&v, m)| v - m));
                    }
                    let n = chunk.len();
                    f32::gemm(
                        n,
                        d,
                        f,
                        &buf,
                        d as isize,
                        1,
                        &p.components,
                        1,
                        d as isize,
                        0.0,
                        &mut codes[..n * f],
                        f as isize,
                        1,
                    );
                    out.extend(codes[..n * f].chunks_exact(f).map(<[f32]>::to_vec));
                }
            }
            Model::Pca(None) => unreachable!("trained PCA always has a fit"),
        }
        Ok(out)
    }

    /// Serializes to the `PVRG` binary format.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.check_trained()?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        out.push(self.kind.code());
        put_u32(&mut out, self.feature_dim as u32);
        match &self.model {
            Model::Pca(Some(p)) => {
                put_u32(&mut out, 1);
                out.push(LAYER_PCA);
                put_dims(&mut out, &[p.fit.feature_dim(), p.fit.dim]);
                put_f32s(&mut out, p.mean.iter().copied());
                put_f32s(&mut out, p.components.iter().copied());
                put_f32s(&mut out, p.fit.variances.iter().map(|&v| v as f32));
            }
            Model::Net(net) => {
                put_u32(&mut out, net.layers.len() as u32);
                for l in &net.layers {
                    let (code, dims) = layer_header(&l.kind);
                    out.push(code);
                    put_dims(&mut out, &dims);
                    for p in &l.params {
                        put_f32s(&mut out, p.iter().copied());
                    }
                }
            }
            Model::Pca(None) => unreachable!("trained PCA always has a fit"),
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        if r.bytes(4, "magic")? != MAGIC {
            return Err(Error::format(0, "bad magic, expected PVRG"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        let kind_off = r.offset();
        let kind = RegressorKind::from_code(r.u8("kind")?)
            .ok_or_else(|| Error::format(kind_off, "unknown regressor kind"))?;
        let feature_dim = r.u32("feature dimension")? as usize;
        let n_layers = r.u32("layer count")? as usize;
        let model = if kind == RegressorKind::Pca {
            if n_layers != 1 {
                return Err(Error::format(
                    r.offset(),
                    "PCA model must have exactly one layer",
                ));
            }
            let off = r.offset();
            if r.u8("layer type")? != LAYER_PCA {
                return Err(Error::format(off, "expected PCA layer"));
            }
            let dims = read_dims(&mut r)?;
            let [f, d] = dims[..] else {
                return Err(Error::format(r.offset(), "PCA layer needs 2 dims"));
            };
            if f != feature_dim {
                return Err(Error::format(r.offset(), "PCA width disagrees with header"));
            }
            let widen = |v: Vec<f32>| v.into_iter().map(f64::from).collect::<Vec<_>>();
            let mean = widen(r.f32s(d, "PCA mean")?);
            let components = widen(r.f32s(f * d, "PCA components")?);
            let variances = widen(r.f32s(f, "PCA variances")?);
            Model::Pca(Some(PcaCodec::new(Pca {
                mean,
                components,
                variances,
                dim: d,
            })))
        } else {
            let mut layers = Vec::with_capacity(n_layers.min(1024));
            for _ in 0..n_layers {
                let off = r.offset();
                let code = r.u8("layer type")?;
                let dims = read_dims(&mut r)?;
                let lk = layer_kind(code, &dims).ok_or_else(|| {
                    Error::format(off, format!("bad layer type {code} or dims {dims:?}"))
                })?;
                let mut layer = Layer::<f32>::zeros(lk);
                for p in &mut layer.params {
                    let vals = r.f32s(p.len(), "layer parameters")?;
                    p.copy_from_slice(&vals);
                }
                layers.push(layer);
            }
            let net = Network::from_layers(layers, feature_dim)
                .map_err(|e| Error::format(r.offset(), e.to_string()))?;
            Model::Net(net)
        };
        r.finish()?;
        Ok(Self {
            kind,
            feature_dim,
            model,
            trained: true,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
}

fn check_len(p: &Patch) -> Result<()> {
    if p.data.len() != PATCH_LEN {
        return Err(Error::DimensionMismatch {
            expected: PATCH_LEN,
            actual: p.data.len(),
        });
    }
    Ok(())
}

const LAYER_DENSE: u8 = 0;
const LAYER_CONV: u8 = 1;
const LAYER_PRELU: u8 = 2;
const LAYER_MAXPOOL: u8 = 3;
const LAYER_DECONV: u8 = 4;
const LAYER_TANH: u8 = 5;
const LAYER_PCA: u8 = 7;

fn layer_header(k: &LayerKind) -> (u8, Vec<usize>) {
    match *k {
        LayerKind::Dense { inputs, outputs } => (LAYER_DENSE, vec![inputs, outputs]),
        LayerKind::Conv2d {
            in_channels,
            out_channels,
            height,
            width,
            kernel,
        } => (
            LAYER_CONV,
            vec![in_channels, out_channels, height, width, kernel],
        ),
        LayerKind::PRelu { channels, spatial } => (LAYER_PRELU, vec![channels, spatial]),
        LayerKind::MaxPool2 {
            channels,
            height,
            width,
        } => (LAYER_MAXPOOL, vec![channels, height, width]),
        LayerKind::Deconv2x2 {
            in_channels,
            out_channels,
            height,
            width,
        } => (LAYER_DECONV, vec![in_channels, out_channels, height, width]),
        LayerKind::Tanh { len } => (LAYER_TANH, vec![len]),
    }
}

/// Largest accepted layer dimension; guards allocations on corrupt input.
const MAX_DIM: usize = 1 << 16;

fn layer_kind(code: u8, d: &[usize]) -> Option<LayerKind> {
    if d.iter().any(|&v| v == 0 || v > MAX_DIM) {
        return None;
    }
    Some(match (code, d) {
        (LAYER_DENSE, &[inputs, outputs]) => LayerKind::Dense { inputs, outputs },
        (LAYER_CONV, &[in_channels, out_channels, height, width, kernel]) if kernel % 2 == 1 => {
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                height,
                width,
                kernel,
            }
        }
        (LAYER_PRELU, &[channels, spatial]) => LayerKind::PRelu { channels, spatial },
        (LAYER_MAXPOOL, &[channels, height, width]) if height % 2 == 0 && width % 2 == 0 => {
            LayerKind::MaxPool2 {
                channels,
                height,
                width,
            }
        }
        (LAYER_DECONV, &[in_channels, out_channels, height, width]) => LayerKind::Deconv2x2 {
            in_channels,
            out_channels,
            height,
            width,
        },
        (LAYER_TANH, &[len]) => LayerKind::Tanh { len },
        _ => return None,
    })
}

fn put_dims(out: &mut Vec<u8>, dims: &[usize]) {
    put_u32(out, dims.len() as u32);
    for &d in dims {
        put_u32(out, d as u32);
    }
}

fn read_dims(r: &mut Reader) -> Result<Vec<usize>> {
    let off = r.offset();
    let n = r.u32("dimension count")? as usize;
    if n > 8 {
        return Err(Error::format(
            off,
            format!("implausible dimension count {n}"),
        ));
    }
    (0..n)
        .map(|_| r.u32("dimension").map(|v| v as usize))
        .collect()
}

/// Per-regressor reconstruction error table.
#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructionReport {
    pub rows: usize,
    /// `(name, mean squared error over all patches)`.
    pub mse: Vec<(String, f64)>,
}

impl ReconstructionReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("regressor,mse\n");
        for (name, m) in &self.mse {
            let _ = writeln!(s, "{name},{m:.8}");
        }
        s
    }
}

/// Reconstructs every patch with every regressor. When `png` is given, writes
/// a grid with one row per patch and one column per input/reconstruction;
/// each cell shows color on the left and depth on the right.
pub fn reconstruction_report(
    regressors: &[(String, &Regressor)],
    patches: &[Patch],
    png: Option<&Path>,
) -> Result<ReconstructionReport> {
    let mut recons: Vec<Vec<Vec<f32>>> = Vec::with_capacity(regressors.len());
    let mut mse = Vec::with_capacity(regressors.len());
    for (name, reg) in regressors {
        let mut sum = 0.0f64;
        let mut rows = Vec::with_capacity(patches.len());
        for p in patches {
            let (_, r) = reg.forward(p)?;
            sum += r
                .iter()
                .zip(&p.data)
                .map(|(&a, &b)| ((a - b) as f64).powi(2))
                .sum::<f64>();
            rows.push(r);
        }
        mse.push((
            name.clone(),
            sum / (patches.len().max(1) * PATCH_LEN) as f64,
        ));
        recons.push(rows);
    }
    if let Some(path) = png {
        let cell_w = 2 * PATCH_SIZE + 2;
        let cell_h = PATCH_SIZE + 2;
        let cols = regressors.len() + 1;
        let mut img = image::RgbImage::new(
            (cols * cell_w) as u32,
            (patches.len().max(1) * cell_h) as u32,
        );
        for (row, p) in patches.iter().enumerate() {
            draw_cell(&mut img, &p.data, 0, row * cell_h);
            for (c, rs) in recons.iter().enumerate() {
                draw_cell(&mut img, &rs[row], (c + 1) * cell_w, row * cell_h);
            }
        }
        img.save(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    }
    Ok(ReconstructionReport {
        rows: patches.len(),
        mse,
    })
}

fn to_byte(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

fn draw_cell(img: &mut image::RgbImage, data: &[f32], x0: usize, y0: usize) {
    for y in 0..PATCH_SIZE {
        for x in 0..PATCH_SIZE {
            let i = y * PATCH_SIZE + x;
            let rgb = [
                to_byte(data[i]),
                to_byte(data[PATCH_PIXELS + i]),
                to_byte(data[2 * PATCH_PIXELS + i]),
            ];
            img.put_pixel((x0 + x) as u32, (y0 + y) as u32, image::Rgb(rgb));
            let d = to_byte(data[3 * PATCH_PIXELS + i]);
            img.put_pixel(
                (x0 + PATCH_SIZE + x) as u32,
                (y0 + y) as u32,
                image::Rgb([d, d, d]),
            );
        }
    }
}
