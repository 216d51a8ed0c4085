//! Shared-weight backbone: input projection followed by a stack of dilated
//! residual convolution blocks (dilation `2^l` in block `l`), producing one
//! embedding per timestamp.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3, ArrayD, Ix3, IxDyn};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Elem, Graph, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderConfig {
    pub input_dims: usize,
    pub hidden_dims: usize,
    pub output_dims: usize,
    /// Residual blocks before the final dilation block; the stack has
    /// `n_residual_blocks + 1` blocks in total.
    pub n_residual_blocks: usize,
    pub kernel_size: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            input_dims: 1,
            hidden_dims: 64,
            output_dims: 320,
            n_residual_blocks: 10,
            kernel_size: 3,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dims != 1 {
            return Err(Error::Config("input_dims must be 1 (univariate)".into()));
        }
        if self.hidden_dims == 0 || self.output_dims == 0 || self.kernel_size == 0 {
            return Err(Error::Config("encoder dims must be positive".into()));
        }
        Ok(())
    }

    /// Number of blocks including the final dilation block.
    pub fn n_blocks(&self) -> usize {
        self.n_residual_blocks + 1
    }

    /// Dilation of block `l`.
    pub fn dilation(&self, l: usize) -> usize {
        1usize << l
    }

    /// Receptive field after block `l` (inclusive), in timesteps.
    pub fn receptive_field(&self, l: usize) -> usize {
        let mut rf = 1usize;
        for i in 0..=l {
            rf += 2 * (self.kernel_size - 1) * self.dilation(i);
        }
        rf
    }

    fn block_channels(&self, l: usize) -> (usize, usize) {
        let out = if l == self.n_blocks() - 1 {
            self.output_dims
        } else {
            self.hidden_dims
        };
        (self.hidden_dims, out)
    }

    fn block_has_projector(&self, l: usize) -> bool {
        let (inp, out) = self.block_channels(l);
        inp != out || l == self.n_blocks() - 1
    }
}

struct LayoutEntry {
    name: String,
    shape: Vec<usize>,
    fan_in: usize,
}

fn layout(cfg: &EncoderConfig) -> Vec<LayoutEntry> {
    let mut entries = vec![
        LayoutEntry {
            name: "proj.w".into(),
            shape: vec![cfg.input_dims, cfg.hidden_dims],
            fan_in: cfg.input_dims,
        },
        LayoutEntry {
            name: "proj.b".into(),
            shape: vec![cfg.hidden_dims],
            fan_in: cfg.input_dims,
        },
    ];
    for l in 0..cfg.n_blocks() {
        let (inp, out) = cfg.block_channels(l);
        let k = cfg.kernel_size;
        entries.push(LayoutEntry {
            name: format!("block{l}.conv1.w"),
            shape: vec![out, inp, k],
            fan_in: inp * k,
        });
        entries.push(LayoutEntry {
            name: format!("block{l}.conv1.b"),
            shape: vec![out],
            fan_in: inp * k,
        });
        entries.push(LayoutEntry {
            name: format!("block{l}.conv2.w"),
            shape: vec![out, out, k],
            fan_in: out * k,
        });
        entries.push(LayoutEntry {
            name: format!("block{l}.conv2.b"),
            shape: vec![out],
            fan_in: out * k,
        });
        if cfg.block_has_projector(l) {
            entries.push(LayoutEntry {
                name: format!("block{l}.res.w"),
                shape: vec![out, inp, 1],
                fan_in: inp,
            });
            entries.push(LayoutEntry {
                name: format!("block{l}.res.b"),
                shape: vec![out],
                fan_in: inp,
            });
        }
    }
    entries
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<E: Elem> {
    pub name: String,
    pub value: ArrayD<E>,
}

/// Encoder parameters plus config. One instance is shared by all three views
/// (and the full-series pass); there are no view-specific weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<E: Elem> {
    cfg: EncoderConfig,
    params: Vec<Param<E>>,
}

/// Graph leaves for all encoder parameters, in layout order.
pub struct EncoderVars {
    pub vars: Vec<Var>,
}

impl<E: Elem> Encoder<E> {
    /// Deterministic uniform He-style init: every tensor is drawn from
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` in a fixed order from `seed`.
    pub fn init(cfg: EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = layout(&cfg)
            .into_iter()
            .map(|e| {
                let bound = 1.0 / (e.fan_in as f64).sqrt();
                let value = ArrayD::from_shape_fn(IxDyn(&e.shape), |_| {
                    E::from_f64((rng.random::<f64>() * 2.0 - 1.0) * bound)
                });
                Param { name: e.name, value }
            })
            .collect();
        Ok(Encoder { cfg, params })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[Param<E>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<E>] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Insert every parameter as a graph leaf.
    pub fn bind(&self, g: &mut Graph<E>) -> EncoderVars {
        EncoderVars {
            vars: self.params.iter().map(|p| g.leaf(p.value.clone())).collect(),
        }
    }

    /// Encode a batch (B, L) into per-timestamp embeddings (B, L, D), on the
    /// tape. A dropout mask is applied after the input projection when
    /// `dropout > 0`.
    pub fn encode(
        &self,
        g: &mut Graph<E>,
        vars: &EncoderVars,
        x: &Array2<f64>,
        dropout: Option<(f64, &mut ChaCha8Rng)>,
    ) -> Result<Var> {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("encoder input"));
        }
        let (b, l) = x.dim();
        assert!(l >= 1);
        let xe = Array2::from_shape_fn((b * l, 1), |(i, _)| E::from_f64(x[[i / l, i % l]]));
        let xv = g.leaf(xe.into_dyn());

        let mut idx = 0usize;
        let mut next = || {
            let v = vars.vars[idx];
            idx += 1;
            v
        };

        let proj_w = next();
        let proj_b = next();
        let mut h = g.matmul(xv, proj_w);
        h = g.add_bias(h, proj_b, 1);
        h = g.reshape(h, &[b, l, self.cfg.hidden_dims]);
        if let Some((p, rng)) = dropout {
            if p > 0.0 {
                let keep = 1.0 - p;
                let mask = ArrayD::from_shape_fn(IxDyn(&[b, l, self.cfg.hidden_dims]), |_| {
                    if rng.random::<f64>() < keep {
                        E::from_f64(1.0 / keep)
                    } else {
                        E::zero()
                    }
                });
                h = g.mul_const(h, mask);
            }
        }
        h = g.swap_axes(h, 1, 2); // (B, H, L)

        for bl in 0..self.cfg.n_blocks() {
            let dil = self.cfg.dilation(bl);
            let c1w = next();
            let c1b = next();
            let c2w = next();
            let c2b = next();
            let res = if self.cfg.block_has_projector(bl) {
                let rw = next();
                let rb = next();
                g.conv1d(h, rw, rb, 1)
            } else {
                h
            };
            let a1 = g.gelu(h);
            let c1 = g.conv1d(a1, c1w, c1b, dil);
            let a2 = g.gelu(c1);
            let c2 = g.conv1d(a2, c2w, c2b, dil);
            h = g.add(c2, res);
        }
        Ok(g.swap_axes(h, 1, 2)) // (B, L, D)
    }

    /// Inference-only forward pass; bit-identical to [`Encoder::encode`].
    pub fn encode_infer(&self, x: &Array2<f64>) -> Result<Array3<E>> {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("encoder input"));
        }
        let (b, l) = x.dim();
        let mut idx = 0usize;
        let mut next = || {
            let v = &self.params[idx].value;
            idx += 1;
            v
        };
        let proj_w = next().view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let proj_b = next().view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let xe = Array2::from_shape_fn((b * l, 1), |(i, _)| E::from_f64(x[[i / l, i % l]]));
        let mut flat = xe.dot(&proj_w);
        // same op order as the tape: matmul, then broadcast bias add
        flat = flat + &proj_b.view().into_shape_with_order((1, proj_b.len())).unwrap();
        let h3 = flat
            .into_shape_with_order((b, l, self.cfg.hidden_dims))
            .unwrap();
        let mut hv = h3.view();
        hv.swap_axes(1, 2);
        let mut h: Array3<E> = hv.as_standard_layout().into_owned();

        let gelu = |arr: &Array3<E>| -> Array3<E> {
            let c = E::from_f64(0.797_884_560_802_865_4);
            let k = E::from_f64(0.044715);
            let half = E::from_f64(0.5);
            arr.mapv(|v| {
                let u = c * (v + k * v * v * v);
                half * v * (E::one() + u.tanh())
            })
        };

        for bl in 0..self.cfg.n_blocks() {
            let dil = self.cfg.dilation(bl);
            let c1w = next().view().into_dimensionality::<Ix3>().unwrap();
            let c1b = next().view().into_dimensionality::<ndarray::Ix1>().unwrap();
            let c2w = next().view().into_dimensionality::<Ix3>().unwrap();
            let c2b = next().view().into_dimensionality::<ndarray::Ix1>().unwrap();
            let res = if self.cfg.block_has_projector(bl) {
                let rw = next().view().into_dimensionality::<Ix3>().unwrap();
                let rb = next().view().into_dimensionality::<ndarray::Ix1>().unwrap();
                crate::autodiff::conv1d_forward(h.view(), rw, rb, 1)
            } else {
                h.clone()
            };
            let a1 = gelu(&h);
            let c1 = crate::autodiff::conv1d_forward(a1.view(), c1w, c1b, dil);
            let a2 = gelu(&c1);
            let c2 = crate::autodiff::conv1d_forward(a2.view(), c2w, c2b, dil);
            h = c2 + &res;
        }
        let mut hv = h.view();
        hv.swap_axes(1, 2);
        Ok(hv.as_standard_layout().into_owned())
    }
}

/// Max over the time axis, ties to the earliest timestep. The per-instance
/// representation fed to clustering.
pub fn pool_instance<E: Elem>(z: &Array3<E>) -> Array2<E> {
    let (b, t, d) = z.dim();
    assert!(t >= 1);
    let mut out = Array2::<E>::zeros((b, d));
    for bi in 0..b {
        for di in 0..d {
            let mut best = z[[bi, 0, di]];
            for ti in 1..t {
                let c = z[[bi, ti, di]];
                if c > best {
                    best = c;
                }
            }
            out[[bi, di]] = best;
        }
    }
    out
}

// ---- checkpoint io ----------------------------------------------------

const MAGIC: &[u8; 8] = b"FCACKPT1";

fn push_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn at_end(&self) -> bool {
        self.pos == self.buf.len()
    }
}

impl<E: Elem> Encoder<E> {
    /// Serialize parameters (and optional tagged extra sections) to `path`.
    /// Round-trips bit-exactly.
    pub fn save(&self, path: &Path, extras: &[([u8; 4], Vec<u8>)]) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.push(E::WIDTH);
        for v in [
            self.cfg.input_dims,
            self.cfg.hidden_dims,
            self.cfg.output_dims,
            self.cfg.n_residual_blocks,
            self.cfg.kernel_size,
        ] {
            push_u64(&mut buf, v as u64);
        }
        push_u64(&mut buf, self.params.len() as u64);
        for p in &self.params {
            let nb = p.name.as_bytes();
            buf.extend_from_slice(&(nb.len() as u16).to_le_bytes());
            buf.extend_from_slice(nb);
            buf.push(p.value.ndim() as u8);
            for &d in p.value.shape() {
                push_u64(&mut buf, d as u64);
            }
            for &v in p.value.iter() {
                E::append_le(&mut buf, v);
            }
        }
        for (tag, bytes) in extras {
            buf.extend_from_slice(tag);
            push_u64(&mut buf, bytes.len() as u64);
            buf.extend_from_slice(bytes);
        }
        let mut f = fs::File::create(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        f.write_all(&buf).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<(Self, Vec<([u8; 4], Vec<u8>)>)> {
        let mut raw = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut raw))
            .map_err(|source| Error::Io {
                path: path.to_path_buf(),
                source,
            })?;
        let mut r = Reader { buf: &raw, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let width = r.u8()?;
        if width != E::WIDTH {
            return Err(Error::Checkpoint(format!(
                "dtype width {width} does not match requested {}",
                E::WIDTH
            )));
        }
        let mut dims = [0usize; 5];
        for d in &mut dims {
            *d = r.u64()? as usize;
        }
        let cfg = EncoderConfig {
            input_dims: dims[0],
            hidden_dims: dims[1],
            output_dims: dims[2],
            n_residual_blocks: dims[3],
            kernel_size: dims[4],
        };
        let n_params = r.u64()? as usize;
        let mut params = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            let nlen = r.u16()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec())
                .map_err(|_| Error::Checkpoint("bad param name".into()))?;
            let ndim = r.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let count: usize = shape.iter().product();
            let w = E::WIDTH as usize;
            let data = r.take(count * w)?;
            let mut vals = Vec::with_capacity(count);
            for i in 0..count {
                vals.push(E::read_le(&data[i * w..]));
            }
            let value = ArrayD::from_shape_vec(IxDyn(&shape), vals)
                .map_err(|_| Error::Checkpoint("bad param shape".into()))?;
            params.push(Param { name, value });
        }
        // integrity: parameter list must match the config's layout
        let expect = layout(&cfg);
        if expect.len() != params.len()
            || expect
                .iter()
                .zip(&params)
                .any(|(e, p)| e.name != p.name || e.shape != p.value.shape())
        {
            return Err(Error::Checkpoint("parameter layout mismatch".into()));
        }
        let mut extras = Vec::new();
        while !r.at_end() {
            let tag: [u8; 4] = r.take(4)?.try_into().unwrap();
            let len = r.u64()? as usize;
            extras.push((tag, r.take(len)?.to_vec()));
        }
        Ok((Encoder { cfg, params }, extras))
    }
}
