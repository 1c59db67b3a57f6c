//! Array persistence, trained-component files, dataset manifests, and the
//! synthetic eddy dataset generator.
//!
//! Two tiny binary formats cover all artifacts: `QGARRAY` holds one 2D field
//! or a 3D frame sequence (64-bit little-endian floats, row-major, trailing
//! CRC-32 over the payload), and `QGPARAM` holds a named-tensor table for a
//! trained velocity component. Both round-trip bit-exactly. The manifest is
//! line-oriented text: key = value sections plus a sample table, so a dataset
//! directory is self-describing and can be validated before training starts.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dynamics::{geostrophic_velocities, integrate_with, PhysicalParams, StepConfig};
use crate::elliptic::CGConfig;
use crate::error::{Error, Result};
use crate::field::{convolve, BoundaryPolicy, Field2D, GridSpec, StencilKernel};
use crate::learnable::{ConvNetParams, GradientFilterParams, VelocityModel};
use crate::scalar::{lit, to_f64, Scalar};
use crate::training::BatchSample;

/// File name the generator writes inside a dataset directory.
pub const MANIFEST_FILE: &str = "manifest.txt";

// ---------------------------------------------------------------------------
// CRC-32
// ---------------------------------------------------------------------------

const CRC32_TABLE: [u32; 256] = {
    let mut table = [0u32; 256];
    let mut i = 0;
    while i < 256 {
        let mut c = i as u32;
        let mut k = 0;
        while k < 8 {
            c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
            k += 1;
        }
        table[i] = c;
        i += 1;
    }
    table
};

/// CRC-32 (IEEE 802.3, reflected polynomial 0xEDB88320).
pub fn crc32(bytes: &[u8]) -> u32 {
    let mut c = 0xFFFF_FFFFu32;
    for &b in bytes {
        c = CRC32_TABLE[((c ^ b as u32) & 0xFF) as usize] ^ (c >> 8);
    }
    c ^ 0xFFFF_FFFF
}

// ---------------------------------------------------------------------------
// Little-endian byte helpers
// ---------------------------------------------------------------------------

fn put_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let left = self.buf.len() - self.pos;
        if n > left {
            return Err(Error::Format(format!(
                "truncated file: wanted {n} bytes at offset {}, {left} available",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

fn f64_slice_from_bytes(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

// ---------------------------------------------------------------------------
// Array files (QGARRAY)
// ---------------------------------------------------------------------------

const ARRAY_MAGIC: &[u8; 8] = b"QGARRAY\0";
const ARRAY_VERSION: u32 = 1;
const DTYPE_F64_LE: u8 = 1;

fn encode_array(dims: &[u64], data: &[f64]) -> Vec<u8> {
    let numel: u64 = dims.iter().product();
    debug_assert_eq!(numel as usize, data.len());
    let mut out = Vec::with_capacity(14 + dims.len() * 8 + data.len() * 8 + 4);
    out.extend_from_slice(ARRAY_MAGIC);
    put_u32(&mut out, ARRAY_VERSION);
    out.push(DTYPE_F64_LE);
    out.push(dims.len() as u8);
    for &d in dims {
        put_u64(&mut out, d);
    }
    let payload_start = out.len();
    for &v in data {
        put_f64(&mut out, v);
    }
    let crc = crc32(&out[payload_start..]);
    put_u32(&mut out, crc);
    out
}

fn decode_array(bytes: &[u8]) -> Result<(Vec<u64>, Vec<f64>)> {
    let mut r = Reader::new(bytes);
    let magic = r.take(8)?;
    if magic != ARRAY_MAGIC {
        return Err(Error::Format("bad magic: not an array file".into()));
    }
    let version = r.u32()?;
    if version != ARRAY_VERSION {
        return Err(Error::Format(format!(
            "array file version mismatch: file has {version}, reader supports {ARRAY_VERSION}"
        )));
    }
    let dtype = r.u8()?;
    if dtype != DTYPE_F64_LE {
        return Err(Error::Format(format!("unsupported dtype tag {dtype}")));
    }
    let ndim = r.u8()? as usize;
    if !(ndim == 2 || ndim == 3) {
        return Err(Error::Format(format!("expected 2 or 3 dims, got {ndim}")));
    }
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        dims.push(r.u64()?);
    }
    let numel = dims.iter().try_fold(1u64, |a, &d| a.checked_mul(d));
    let numel = numel.ok_or_else(|| Error::Format("dimension overflow".into()))? as usize;
    let payload = r.take(numel * 8)?;
    let stored = r.u32()?;
    if r.remaining() != 0 {
        return Err(Error::Format(format!(
            "{} trailing bytes after checksum",
            r.remaining()
        )));
    }
    let computed = crc32(payload);
    if stored != computed {
        return Err(Error::Format(format!(
            "checksum mismatch: stored {stored:08x}, computed {computed:08x}"
        )));
    }
    Ok((dims, f64_slice_from_bytes(payload)))
}

fn field_from_raw<T: Scalar>(ny: u64, nx: u64, data: &[f64], dx: T, dy: T) -> Result<Field2D<T>> {
    let grid = GridSpec::new(nx as usize, ny as usize, dx, dy)?;
    Field2D::from_values(grid, data.iter().map(|&v| lit(v)).collect())
}

/// Writes one 2D field as an array file (dims = (ny, nx)).
pub fn save_field<T: Scalar>(field: &Field2D<T>, path: &Path) -> Result<()> {
    let data: Vec<f64> = field.values().iter().map(|&v| to_f64(v)).collect();
    let bytes = encode_array(&[field.ny() as u64, field.nx() as u64], &data);
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Reads one 2D field; the grid spacings are not stored in the file and must
/// be supplied (they live in the dataset manifest).
pub fn load_field<T: Scalar>(path: &Path, dx: T, dy: T) -> Result<Field2D<T>> {
    let bytes = std::fs::read(path)?;
    let (dims, data) = decode_array(&bytes)?;
    if dims.len() != 2 {
        return Err(Error::Format(format!(
            "expected a 2D field, file holds {} dims",
            dims.len()
        )));
    }
    field_from_raw(dims[0], dims[1], &data, dx, dy)
}

/// Writes a frame sequence as one array file (dims = (t, ny, nx)). All
/// frames must share a grid.
pub fn save_sequence<T: Scalar>(frames: &[Field2D<T>], path: &Path) -> Result<()> {
    let first = frames
        .first()
        .ok_or_else(|| Error::Usage("cannot save an empty sequence".into()))?;
    let mut data = Vec::with_capacity(frames.len() * first.grid().cells());
    for f in frames {
        first.same_grid(f)?;
        data.extend(f.values().iter().map(|&v| to_f64(v)));
    }
    let dims = [frames.len() as u64, first.ny() as u64, first.nx() as u64];
    std::fs::write(path, encode_array(&dims, &data))?;
    Ok(())
}

/// Reads a frame sequence saved by [`save_sequence`].
pub fn load_sequence<T: Scalar>(path: &Path, dx: T, dy: T) -> Result<Vec<Field2D<T>>> {
    let bytes = std::fs::read(path)?;
    let (dims, data) = decode_array(&bytes)?;
    if dims.len() != 3 {
        return Err(Error::Format(format!(
            "expected a 3D sequence, file holds {} dims",
            dims.len()
        )));
    }
    let (nt, ny, nx) = (dims[0] as usize, dims[1] as usize, dims[2] as usize);
    let cells = ny * nx;
    let mut frames = Vec::with_capacity(nt);
    for t in 0..nt {
        frames.push(field_from_raw(
            dims[1],
            dims[2],
            &data[t * cells..(t + 1) * cells],
            dx,
            dy,
        )?);
    }
    Ok(frames)
}

/// Reads a single frame out of a sequence file.
pub fn load_frame<T: Scalar>(path: &Path, index: usize, dx: T, dy: T) -> Result<Field2D<T>> {
    let frames = load_sequence(path, dx, dy)?;
    frames.into_iter().nth(index).ok_or_else(|| {
        Error::Usage(format!("frame index {index} out of range"))
    })
}

/// Renders a field as CSV with header `y,x,value` (row-major order).
pub fn field_to_csv<T: Scalar>(field: &Field2D<T>) -> String {
    let mut s = String::from("y,x,value\n");
    for iy in 0..field.ny() {
        for ix in 0..field.nx() {
            let _ = writeln!(s, "{iy},{ix},{:?}", to_f64(field.at(iy, ix)));
        }
    }
    s
}

/// Writes [`field_to_csv`] output to a file.
pub fn save_field_csv<T: Scalar>(field: &Field2D<T>, path: &Path) -> Result<()> {
    std::fs::write(path, field_to_csv(field))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Trained-component files (QGPARAM)
// ---------------------------------------------------------------------------

const COMPONENT_MAGIC: &[u8; 8] = b"QGPARAM\0";
const COMPONENT_VERSION: u32 = 1;
const KIND_FILTER: u8 = 1;
const KIND_CONVNET: u8 = 2;

const HYPER_BN_EPS: &str = "hyper.bn_eps";
const HYPER_BN_MOMENTUM: &str = "hyper.bn_momentum";
const HYPER_LEAKY_SLOPE: &str = "hyper.leaky_slope";

struct NamedTensor {
    name: String,
    shape: Vec<u64>,
    data: Vec<f64>,
}

fn encode_component(kind: u8, tensors: &[NamedTensor]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(COMPONENT_MAGIC);
    put_u32(&mut out, COMPONENT_VERSION);
    let body_start = out.len();
    out.push(kind);
    put_u32(&mut out, tensors.len() as u32);
    for t in tensors {
        debug_assert!(t.name.len() <= u16::MAX as usize);
        put_u16(&mut out, t.name.len() as u16);
        out.extend_from_slice(t.name.as_bytes());
        out.push(t.shape.len() as u8);
        for &d in &t.shape {
            put_u64(&mut out, d);
        }
        for &v in &t.data {
            put_f64(&mut out, v);
        }
    }
    let crc = crc32(&out[body_start..]);
    put_u32(&mut out, crc);
    out
}

fn decode_component(bytes: &[u8]) -> Result<(u8, Vec<NamedTensor>)> {
    if bytes.len() < 16 {
        return Err(Error::Format("truncated file: too short for a header".into()));
    }
    if &bytes[..8] != COMPONENT_MAGIC {
        return Err(Error::Format("bad magic: not a component file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != COMPONENT_VERSION {
        return Err(Error::Format(format!(
            "component file version mismatch: file has {version}, reader supports {COMPONENT_VERSION}"
        )));
    }
    let body = &bytes[12..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let computed = crc32(body);
    if stored != computed {
        return Err(Error::Format(format!(
            "checksum mismatch: stored {stored:08x}, computed {computed:08x}"
        )));
    }
    let mut r = Reader::new(body);
    let kind = r.u8()?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()?);
        }
        let numel = shape.iter().try_fold(1u64, |a, &d| a.checked_mul(d));
        let numel = numel.ok_or_else(|| Error::Format("dimension overflow".into()))? as usize;
        let data = f64_slice_from_bytes(r.take(numel * 8)?);
        tensors.push(NamedTensor { name, shape, data });
    }
    if r.remaining() != 0 {
        return Err(Error::Format(format!(
            "{} trailing bytes after the tensor table",
            r.remaining()
        )));
    }
    Ok((kind, tensors))
}

fn store_tensors<T: Scalar>(model: &VelocityModel<T>) -> Vec<NamedTensor> {
    model
        .store()
        .map(|store| {
            store
                .entries()
                .iter()
                .map(|e| NamedTensor {
                    name: e.name.clone(),
                    shape: e.value.shape().iter().map(|&d| d as u64).collect(),
                    data: e.value.data().iter().map(|&v| to_f64(v)).collect(),
                })
                .collect()
        })
        .unwrap_or_default()
}

/// Writes a trainable velocity component (filter or ConvNet) as a
/// named-tensor file. The parameter-free model has nothing to export.
pub fn export_component<T: Scalar>(model: &VelocityModel<T>, path: &Path) -> Result<()> {
    let (kind, mut tensors) = match model {
        VelocityModel::FixedQg => {
            return Err(Error::Usage(
                "the fixed model has no parameters to export".into(),
            ))
        }
        VelocityModel::TrainableFilter(_) => (KIND_FILTER, store_tensors(model)),
        VelocityModel::QgPlusConvNet(cp) => {
            let mut ts = store_tensors(model);
            for (name, v) in [
                (HYPER_BN_EPS, cp.bn_eps),
                (HYPER_BN_MOMENTUM, cp.bn_momentum),
                (HYPER_LEAKY_SLOPE, cp.leaky_slope),
            ] {
                ts.push(NamedTensor {
                    name: name.to_string(),
                    shape: vec![],
                    data: vec![to_f64(v)],
                });
            }
            (KIND_CONVNET, ts)
        }
    };
    tensors.shrink_to_fit();
    std::fs::write(path, encode_component(kind, &tensors))?;
    Ok(())
}

fn tensor_map(tensors: Vec<NamedTensor>) -> Result<HashMap<String, NamedTensor>> {
    let mut map = HashMap::with_capacity(tensors.len());
    for t in tensors {
        if map.insert(t.name.clone(), t).is_some() {
            return Err(Error::Format("duplicate tensor name in component file".into()));
        }
    }
    Ok(map)
}

fn take_tensor(
    map: &mut HashMap<String, NamedTensor>,
    name: &str,
    shape: &[usize],
) -> Result<Vec<f64>> {
    let t = map
        .remove(name)
        .ok_or_else(|| Error::Format(format!("component file is missing tensor '{name}'")))?;
    let got: Vec<usize> = t.shape.iter().map(|&d| d as usize).collect();
    if got != shape {
        return Err(Error::Format(format!(
            "tensor '{name}' has shape {got:?}, expected {shape:?}"
        )));
    }
    Ok(t.data)
}

/// Reads a component file back into a velocity model. The tensor table must
/// match the component's canonical parameter set exactly.
pub fn import_component<T: Scalar>(path: &Path) -> Result<VelocityModel<T>> {
    let bytes = std::fs::read(path)?;
    let (kind, tensors) = decode_component(&bytes)?;
    let mut map = tensor_map(tensors)?;
    let model = match kind {
        KIND_FILTER => {
            let data = take_tensor(&mut map, "filter", &[2, 3])?;
            let w: Vec<T> = data.iter().map(|&v| lit(v)).collect();
            VelocityModel::TrainableFilter(GradientFilterParams::from_weights(&w)?)
        }
        KIND_CONVNET => {
            let mut cp = ConvNetParams::<T>::new(0);
            let names: Vec<(String, Vec<usize>)> = cp
                .store()
                .entries()
                .iter()
                .map(|e| (e.name.clone(), e.value.shape().to_vec()))
                .collect();
            for (name, shape) in names {
                let data = take_tensor(&mut map, &name, &shape)?;
                let id = cp.store().id_of(&name).expect("canonical entry");
                for (dst, &src) in cp
                    .store_mut()
                    .value_mut(id)
                    .data_mut()
                    .iter_mut()
                    .zip(data.iter())
                {
                    *dst = lit(src);
                }
            }
            cp.bn_eps = lit(take_tensor(&mut map, HYPER_BN_EPS, &[])?[0]);
            cp.bn_momentum = lit(take_tensor(&mut map, HYPER_BN_MOMENTUM, &[])?[0]);
            cp.leaky_slope = lit(take_tensor(&mut map, HYPER_LEAKY_SLOPE, &[])?[0]);
            VelocityModel::QgPlusConvNet(cp)
        }
        other => return Err(Error::Format(format!("unknown component kind tag {other}"))),
    };
    if let Some(extra) = map.keys().next() {
        return Err(Error::Format(format!(
            "component file holds unexpected tensor '{extra}'"
        )));
    }
    Ok(model)
}

// ---------------------------------------------------------------------------
// Dataset manifest
// ---------------------------------------------------------------------------

/// Whether a sample belongs to the training or the held-out block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Train,
    Test,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Train => "train",
            Role::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Role> {
        match s {
            "train" => Ok(Role::Train),
            "test" => Ok(Role::Test),
            other => Err(Error::Format(format!(
                "unknown sample role '{other}' (expected train or test)"
            ))),
        }
    }
}

/// One (initial, one-day-target) pair on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord<T: Scalar> {
    pub id: String,
    pub role: Role,
    /// Day index of the initial field within the generated trajectory.
    pub t_offset_days: f64,
    /// Target standard deviation, the per-sample error scale.
    pub sigma: T,
    pub h0_file: String,
    pub target_file: String,
}

/// Eddy initialization and trajectory layout of the synthetic dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorConfig<T: Scalar> {
    pub n_eddies_min: usize,
    pub n_eddies_max: usize,
    /// Eddy amplitude magnitude range, meters (sign is drawn separately).
    pub amp_min: T,
    pub amp_max: T,
    /// Eddy e-folding radius range, meters.
    pub radius_min: T,
    pub radius_max: T,
    /// Discarded spin-up length in forecast horizons ("days").
    pub spinup_days: usize,
    /// Strength of the prescribed non-geostrophic (down-gradient) velocity
    /// component in the generating model. Zero gives pure QG targets.
    pub kappa: T,
    pub train_count: usize,
    pub test_count: usize,
    /// Horizons skipped between the training and test blocks.
    pub gap_days: usize,
}

impl<T: Scalar> Default for GeneratorConfig<T> {
    fn default() -> Self {
        GeneratorConfig {
            n_eddies_min: 4,
            n_eddies_max: 8,
            amp_min: lit(0.1),
            amp_max: lit(0.5),
            radius_min: lit(40_000.0),
            radius_max: lit(120_000.0),
            spinup_days: 2,
            kappa: T::zero(),
            train_count: 12,
            test_count: 6,
            gap_days: 10,
        }
    }
}

impl<T: Scalar> GeneratorConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if self.n_eddies_max < self.n_eddies_min {
            return Err(Error::Config(format!(
                "eddy count range is empty: {}..{}",
                self.n_eddies_min, self.n_eddies_max
            )));
        }
        if !(self.amp_min > T::zero() && self.amp_max >= self.amp_min && self.amp_max.is_finite()) {
            return Err(Error::Config(format!(
                "amplitude range must satisfy 0 < min <= max, got {}..{}",
                self.amp_min, self.amp_max
            )));
        }
        if !(self.radius_min > T::zero()
            && self.radius_max >= self.radius_min
            && self.radius_max.is_finite())
        {
            return Err(Error::Config(format!(
                "radius range must satisfy 0 < min <= max, got {}..{}",
                self.radius_min, self.radius_max
            )));
        }
        if !self.kappa.is_finite() {
            return Err(Error::Config("kappa must be finite".into()));
        }
        if self.train_count == 0 {
            return Err(Error::Config("train_count must be at least 1".into()));
        }
        if self.test_count > 0 && self.gap_days == 0 {
            return Err(Error::Config(
                "gap_days must be at least 1 when a test block is generated".into(),
            ));
        }
        Ok(())
    }
}

/// Self-describing record of a dataset directory: how the fields were made
/// and where each sample lives.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest<T: Scalar> {
    pub grid: GridSpec<T>,
    pub physics: PhysicalParams<T>,
    pub step: StepConfig<T>,
    pub cg: CGConfig<T>,
    pub seed: u64,
    pub generator: GeneratorConfig<T>,
    pub samples: Vec<SampleRecord<T>>,
}

const MANIFEST_HEADER: &str = "qg-dataset-manifest v1";

fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

impl<T: Scalar> DatasetManifest<T> {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{MANIFEST_HEADER}");
        let _ = writeln!(s, "\n[grid]");
        let _ = writeln!(s, "nx = {}", self.grid.nx);
        let _ = writeln!(s, "ny = {}", self.grid.ny);
        let _ = writeln!(s, "dx = {}", fmt_f64(to_f64(self.grid.dx)));
        let _ = writeln!(s, "dy = {}", fmt_f64(to_f64(self.grid.dy)));
        let _ = writeln!(s, "\n[physics]");
        let _ = writeln!(s, "g = {}", fmt_f64(to_f64(self.physics.g)));
        let _ = writeln!(s, "f = {}", fmt_f64(to_f64(self.physics.f)));
        let _ = writeln!(s, "beta = {}", fmt_f64(to_f64(self.physics.beta)));
        let _ = writeln!(s, "l_r = {}", fmt_f64(to_f64(self.physics.l_r)));
        let _ = writeln!(s, "d = {}", fmt_f64(to_f64(self.physics.d)));
        let _ = writeln!(s, "\n[step]");
        let _ = writeln!(s, "dt = {}", fmt_f64(to_f64(self.step.dt)));
        let _ = writeln!(s, "n_steps = {}", self.step.n_steps);
        let _ = writeln!(s, "cfl_max = {}", fmt_f64(to_f64(self.step.cfl_max)));
        let _ = writeln!(s, "\n[cg]");
        let _ = writeln!(s, "max_iters = {}", self.cg.max_iters);
        let _ = writeln!(s, "tol = {}", fmt_f64(to_f64(self.cg.tol)));
        let _ = writeln!(s, "unrolled = {}", self.cg.unrolled);
        let _ = writeln!(s, "\n[generator]");
        let _ = writeln!(s, "seed = {}", self.seed);
        let g = &self.generator;
        let _ = writeln!(s, "n_eddies_min = {}", g.n_eddies_min);
        let _ = writeln!(s, "n_eddies_max = {}", g.n_eddies_max);
        let _ = writeln!(s, "amp_min = {}", fmt_f64(to_f64(g.amp_min)));
        let _ = writeln!(s, "amp_max = {}", fmt_f64(to_f64(g.amp_max)));
        let _ = writeln!(s, "radius_min = {}", fmt_f64(to_f64(g.radius_min)));
        let _ = writeln!(s, "radius_max = {}", fmt_f64(to_f64(g.radius_max)));
        let _ = writeln!(s, "spinup_days = {}", g.spinup_days);
        let _ = writeln!(s, "kappa = {}", fmt_f64(to_f64(g.kappa)));
        let _ = writeln!(s, "train_count = {}", g.train_count);
        let _ = writeln!(s, "test_count = {}", g.test_count);
        let _ = writeln!(s, "gap_days = {}", g.gap_days);
        let _ = writeln!(s, "\n[samples]");
        let _ = writeln!(s, "# id role t_offset_days sigma h0 target");
        for r in &self.samples {
            let _ = writeln!(
                s,
                "{} {} {} {} {} {}",
                r.id,
                r.role.as_str(),
                fmt_f64(r.t_offset_days),
                fmt_f64(to_f64(r.sigma)),
                r.h0_file,
                r.target_file
            );
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = loop {
            match lines.next() {
                Some(l) if l.trim().is_empty() => continue,
                Some(l) => break l.trim(),
                None => return Err(Error::Format("empty manifest".into())),
            }
        };
        if header != MANIFEST_HEADER {
            return Err(Error::Format(format!(
                "manifest header mismatch: got '{header}', expected '{MANIFEST_HEADER}'"
            )));
        }
        const SECTIONS: [&str; 6] = ["grid", "physics", "step", "cg", "generator", "samples"];
        let mut kv: HashMap<&str, HashMap<String, String>> = HashMap::new();
        let mut rows: Vec<Vec<String>> = Vec::new();
        let mut section: Option<&str> = None;
        for line in lines {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = Some(
                    SECTIONS
                        .iter()
                        .find(|&&s| s == name)
                        .copied()
                        .ok_or_else(|| Error::Format(format!("unknown section [{name}]")))?,
                );
                continue;
            }
            match section {
                None => {
                    return Err(Error::Format(format!(
                        "line before the first section: '{line}'"
                    )))
                }
                Some("samples") => {
                    let cols: Vec<String> = line.split_whitespace().map(String::from).collect();
                    if cols.len() != 6 {
                        return Err(Error::Format(format!(
                            "sample row needs 6 columns, got {}: '{line}'",
                            cols.len()
                        )));
                    }
                    rows.push(cols);
                }
                Some(sec) => {
                    let (k, v) = line.split_once('=').ok_or_else(|| {
                        Error::Format(format!("expected 'key = value' in [{sec}]: '{line}'"))
                    })?;
                    let prev = kv
                        .entry(sec)
                        .or_default()
                        .insert(k.trim().to_string(), v.trim().to_string());
                    if prev.is_some() {
                        return Err(Error::Format(format!(
                            "duplicate key '{}' in [{sec}]",
                            k.trim()
                        )));
                    }
                }
            }
        }
        let mut grid_s = Section::new("grid", kv.remove("grid"))?;
        let grid = GridSpec::new(
            grid_s.usize("nx")?,
            grid_s.usize("ny")?,
            grid_s.num::<T>("dx")?,
            grid_s.num::<T>("dy")?,
        )?;
        grid_s.finish()?;
        let mut phys_s = Section::new("physics", kv.remove("physics"))?;
        let physics = PhysicalParams {
            g: phys_s.num("g")?,
            f: phys_s.num("f")?,
            beta: phys_s.num("beta")?,
            l_r: phys_s.num("l_r")?,
            d: phys_s.num("d")?,
        };
        phys_s.finish()?;
        let mut step_s = Section::new("step", kv.remove("step"))?;
        let step = StepConfig {
            dt: step_s.num("dt")?,
            n_steps: step_s.usize("n_steps")?,
            cfl_max: step_s.num("cfl_max")?,
        };
        step_s.finish()?;
        let mut cg_s = Section::new("cg", kv.remove("cg"))?;
        let cg = CGConfig {
            max_iters: cg_s.usize("max_iters")?,
            tol: cg_s.num("tol")?,
            unrolled: cg_s.bool("unrolled")?,
        };
        cg_s.finish()?;
        let mut gen_s = Section::new("generator", kv.remove("generator"))?;
        let seed = gen_s.u64("seed")?;
        let generator = GeneratorConfig {
            n_eddies_min: gen_s.usize("n_eddies_min")?,
            n_eddies_max: gen_s.usize("n_eddies_max")?,
            amp_min: gen_s.num("amp_min")?,
            amp_max: gen_s.num("amp_max")?,
            radius_min: gen_s.num("radius_min")?,
            radius_max: gen_s.num("radius_max")?,
            spinup_days: gen_s.usize("spinup_days")?,
            kappa: gen_s.num("kappa")?,
            train_count: gen_s.usize("train_count")?,
            test_count: gen_s.usize("test_count")?,
            gap_days: gen_s.usize("gap_days")?,
        };
        gen_s.finish()?;
        let samples = rows
            .into_iter()
            .map(|cols| {
                Ok(SampleRecord {
                    id: cols[0].clone(),
                    role: Role::parse(&cols[1])?,
                    t_offset_days: parse_f64("samples", "t_offset_days", &cols[2])?,
                    sigma: lit(parse_f64("samples", "sigma", &cols[3])?),
                    h0_file: cols[4].clone(),
                    target_file: cols[5].clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DatasetManifest {
            grid,
            physics,
            step,
            cg,
            seed,
            generator,
            samples,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// Sample records with the given role, in manifest (temporal) order.
    pub fn role_records(&self, role: Role) -> impl Iterator<Item = &SampleRecord<T>> {
        self.samples.iter().filter(move |r| r.role == role)
    }

    /// Checks the whole dataset: configs, unique ids, every referenced file
    /// present with a valid checksum and the declared grid, positive sigmas,
    /// and the temporal gap between the train and test blocks.
    pub fn validate(&self, dir: &Path) -> Result<()> {
        self.physics.validate()?;
        self.step.validate()?;
        self.cg.validate()?;
        self.generator.validate()?;
        let mut seen = std::collections::HashSet::new();
        for r in &self.samples {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Data(format!("duplicate sample id '{}'", r.id)));
            }
            if !(r.sigma > T::zero()) || !r.sigma.is_finite() {
                return Err(Error::Data(format!(
                    "sample {}: sigma must be positive, got {}",
                    r.id, r.sigma
                )));
            }
            for file in [&r.h0_file, &r.target_file] {
                let path = dir.join(file);
                if !path.is_file() {
                    return Err(Error::Data(format!(
                        "sample {}: missing file {}",
                        r.id,
                        path.display()
                    )));
                }
                let f = load_field::<T>(&path, self.grid.dx, self.grid.dy)?;
                if f.grid() != self.grid {
                    return Err(Error::Data(format!(
                        "sample {}: file {} holds a {}x{} field, manifest grid is {}x{}",
                        r.id,
                        file,
                        f.ny(),
                        f.nx(),
                        self.grid.ny,
                        self.grid.nx
                    )));
                }
            }
        }
        let max_train = self
            .role_records(Role::Train)
            .map(|r| r.t_offset_days)
            .fold(f64::NEG_INFINITY, f64::max);
        let min_test = self
            .role_records(Role::Test)
            .map(|r| r.t_offset_days)
            .fold(f64::INFINITY, f64::min);
        if max_train.is_finite() && min_test.is_finite() {
            // A sample at day t spans [t, t+1]; the declared gap separates
            // the last training target from the first test initial field.
            let gap = min_test - (max_train + 1.0);
            if gap < self.generator.gap_days as f64 {
                return Err(Error::Data(format!(
                    "train/test blocks overlap in time: gap is {gap} days, declared {} days",
                    self.generator.gap_days
                )));
            }
        }
        Ok(())
    }

    /// Loads all samples with the given role into memory.
    pub fn load_role(&self, dir: &Path, role: Role) -> Result<Vec<BatchSample<T>>> {
        self.role_records(role)
            .map(|r| {
                let sample = BatchSample {
                    id: r.id.clone(),
                    h0: load_field(&dir.join(&r.h0_file), self.grid.dx, self.grid.dy)?,
                    target: load_field(&dir.join(&r.target_file), self.grid.dx, self.grid.dy)?,
                    sigma: r.sigma,
                };
                sample.validate()?;
                Ok(sample)
            })
            .collect()
    }
}

struct Section {
    name: &'static str,
    map: HashMap<String, String>,
}

fn parse_f64(section: &str, key: &str, v: &str) -> Result<f64> {
    v.parse::<f64>()
        .map_err(|_| Error::Format(format!("[{section}] {key}: invalid number '{v}'")))
}

impl Section {
    fn new(name: &'static str, map: Option<HashMap<String, String>>) -> Result<Self> {
        let map = map.ok_or_else(|| Error::Format(format!("missing section [{name}]")))?;
        Ok(Section { name, map })
    }

    fn take(&mut self, key: &str) -> Result<String> {
        self.map
            .remove(key)
            .ok_or_else(|| Error::Format(format!("missing key '{key}' in [{}]", self.name)))
    }

    fn num<T: Scalar>(&mut self, key: &str) -> Result<T> {
        Ok(lit(parse_f64(self.name, key, &self.take(key)?)?))
    }

    fn usize(&mut self, key: &str) -> Result<usize> {
        let v = self.take(key)?;
        v.parse::<usize>()
            .map_err(|_| Error::Format(format!("[{}] {key}: invalid integer '{v}'", self.name)))
    }

    fn u64(&mut self, key: &str) -> Result<u64> {
        let v = self.take(key)?;
        v.parse::<u64>()
            .map_err(|_| Error::Format(format!("[{}] {key}: invalid integer '{v}'", self.name)))
    }

    fn bool(&mut self, key: &str) -> Result<bool> {
        let v = self.take(key)?;
        v.parse::<bool>()
            .map_err(|_| Error::Format(format!("[{}] {key}: invalid bool '{v}'", self.name)))
    }

    fn finish(self) -> Result<()> {
        if let Some(k) = self.map.keys().next() {
            return Err(Error::Format(format!(
                "unknown key '{k}' in [{}]",
                self.name
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Synthetic dataset generation
// ---------------------------------------------------------------------------

/// Everything the generator needs; the step config is the per-sample
/// forecast horizon (one "day").
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticConfig<T: Scalar> {
    pub grid: GridSpec<T>,
    pub physics: PhysicalParams<T>,
    pub step: StepConfig<T>,
    pub cg: CGConfig<T>,
    pub generator: GeneratorConfig<T>,
}

impl<T: Scalar> SyntheticConfig<T> {
    pub fn validate(&self) -> Result<()> {
        self.physics.validate()?;
        self.step.validate()?;
        self.cg.validate()?;
        self.generator.validate()
    }
}

/// Generating-model velocities: geostrophic flow plus an optional prescribed
/// down-gradient (divergent, hence non-geostrophic) component of strength
/// kappa. Zero kappa reduces exactly to the fixed QG model.
pub fn generating_velocities<T: Scalar>(
    h: &Field2D<T>,
    p: &PhysicalParams<T>,
    kappa: T,
) -> Result<(Field2D<T>, Field2D<T>)> {
    let (u, v) = geostrophic_velocities(h, p);
    if kappa == T::zero() {
        return Ok((u, v));
    }
    let grid = h.grid();
    let c = -kappa * p.g / p.f;
    let hx = convolve(h, &StencilKernel::centered_x(grid.dx), BoundaryPolicy::Replicate)?;
    let hy = convolve(h, &StencilKernel::centered_y(grid.dy), BoundaryPolicy::Replicate)?;
    Ok((u.add(&hx.scale(c)), v.add(&hy.scale(c))))
}

/// Seeded random eddy initial state, as used by the dataset generator.
pub fn random_eddy_field<T: Scalar>(
    grid: GridSpec<T>,
    gen: &GeneratorConfig<T>,
    seed: u64,
) -> Field2D<T> {
    eddy_field(grid, gen, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Sum of randomly placed signed Gaussian eddies.
fn eddy_field<T: Scalar>(
    grid: GridSpec<T>,
    gen: &GeneratorConfig<T>,
    rng: &mut ChaCha8Rng,
) -> Field2D<T> {
    let n = rng.random_range(gen.n_eddies_min..=gen.n_eddies_max);
    let lx = to_f64(grid.dx) * (grid.nx - 1) as f64;
    let ly = to_f64(grid.dy) * (grid.ny - 1) as f64;
    // (amp, cx, cy, 1/r^2); centers keep a margin so eddies start inside.
    let eddies: Vec<(f64, f64, f64, f64)> = (0..n)
        .map(|_| {
            let mag = rng.random_range(to_f64(gen.amp_min)..=to_f64(gen.amp_max));
            let amp = if rng.random_bool(0.5) { mag } else { -mag };
            let r = rng.random_range(to_f64(gen.radius_min)..=to_f64(gen.radius_max));
            let cx = rng.random_range(0.15..=0.85) * lx;
            let cy = rng.random_range(0.15..=0.85) * ly;
            (amp, cx, cy, 1.0 / (r * r))
        })
        .collect();
    let (dx, dy) = (to_f64(grid.dx), to_f64(grid.dy));
    Field2D::from_fn(grid, |iy, ix| {
        let (x, y) = (ix as f64 * dx, iy as f64 * dy);
        let h = eddies.iter().fold(0.0, |acc, &(amp, cx, cy, inv_r2)| {
            let (ex, ey) = (x - cx, y - cy);
            acc + amp * (-(ex * ex + ey * ey) * inv_r2).exp()
        });
        lit(h)
    })
}

fn advance_one_day<T: Scalar>(
    h: &Field2D<T>,
    kappa: T,
    cfg: &SyntheticConfig<T>,
) -> Result<Field2D<T>> {
    let fc = integrate_with(
        h,
        |h, p| generating_velocities(h, p, kappa),
        &cfg.physics,
        &cfg.step,
        &cfg.cg,
    )?;
    Ok(fc.h)
}

fn target_sigma<T: Scalar>(id: &str, target: &Field2D<T>) -> Result<T> {
    let (_, sigma) = target.mean_std();
    if !(sigma > lit(1e-12)) {
        return Err(Error::Data(format!(
            "constant target in sample {id}: sigma = {sigma}"
        )));
    }
    Ok(sigma)
}

/// Generates a synthetic dataset into `out_dir` and writes its manifest
/// there: random eddy initialization, a discarded fixed-QG spin-up, then a
/// contiguous block of training pairs, a gap, and a test block, all advanced
/// one forecast horizon at a time by the (optionally kappa-perturbed)
/// generating model. Deterministic: the same seed yields byte-identical
/// files. Each emitted pair satisfies target = generating_model(h0), so a
/// matching forecast model reproduces targets to machine precision.
pub fn generate_synthetic<T: Scalar>(
    cfg: &SyntheticConfig<T>,
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest<T>> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let gen = &cfg.generator;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = eddy_field(cfg.grid, gen, &mut rng);
    if gen.spinup_days > 0 {
        let spinup = StepConfig {
            n_steps: gen.spinup_days * cfg.step.n_steps,
            ..cfg.step
        };
        state = integrate_with(
            &state,
            |h, p| generating_velocities(h, p, T::zero()),
            &cfg.physics,
            &spinup,
            &cfg.cg,
        )?
        .h;
    }
    let mut samples = Vec::with_capacity(gen.train_count + gen.test_count);
    let mut day = 0usize;
    let mut index = 0usize;
    for (role, count) in [(Role::Train, gen.train_count), (Role::Test, gen.test_count)] {
        if role == Role::Test {
            if count == 0 {
                break;
            }
            for _ in 0..gen.gap_days {
                state = advance_one_day(&state, gen.kappa, cfg)?;
                day += 1;
            }
        }
        for _ in 0..count {
            let id = format!("s{index:03}");
            let h0 = state.clone();
            state = advance_one_day(&state, gen.kappa, cfg)?;
            let sigma = target_sigma(&id, &state)?;
            let h0_file = format!("{id}_h0.qga");
            let target_file = format!("{id}_target.qga");
            save_field(&h0, &out_dir.join(&h0_file))?;
            save_field(&state, &out_dir.join(&target_file))?;
            samples.push(SampleRecord {
                id,
                role,
                t_offset_days: day as f64,
                sigma,
                h0_file,
                target_file,
            });
            day += 1;
            index += 1;
        }
    }
    let manifest = DatasetManifest {
        grid: cfg.grid,
        physics: cfg.physics,
        step: cfg.step,
        cg: cfg.cg,
        seed,
        generator: *gen,
        samples,
    };
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::integrate_day;

    fn tmpdir(tag: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("qgdiff-dataio-{tag}-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn random_field(nx: usize, ny: usize, seed: u64) -> Field2D<f64> {
        let grid = GridSpec::new(nx, ny, 5500.0, 5500.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Field2D::from_fn(grid, |_, _| rng.random_range(-0.5..0.5))
    }

    #[test]
    fn crc32_known_vectors() {
        assert_eq!(crc32(b"123456789"), 0xCBF4_3926);
        assert_eq!(crc32(b""), 0);
    }

    #[test]
    fn field_round_trip_is_bit_exact() {
        let dir = tmpdir("roundtrip");
        let f = random_field(64, 48, 11);
        let path = dir.join("f.qga");
        save_field(&f, &path).unwrap();
        let raw = std::fs::read(&path).unwrap();
        assert_eq!(raw.len(), 8 + 4 + 1 + 1 + 16 + 64 * 48 * 8 + 4);
        let g = load_field::<f64>(&path, 5500.0, 5500.0).unwrap();
        assert_eq!(f.grid(), g.grid());
        for (a, b) in f.values().iter().zip(g.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn flipped_payload_byte_fails_the_checksum() {
        let dir = tmpdir("crc");
        let path = dir.join("f.qga");
        save_field(&random_field(16, 12, 3), &path).unwrap();
        let mut raw = std::fs::read(&path).unwrap();
        let i = raw.len() - 40;
        raw[i] ^= 0x01;
        std::fs::write(&path, raw).unwrap();
        let err = load_field::<f64>(&path, 1.0, 1.0).unwrap_err();
        assert!(matches!(err, Error::Format(ref m) if m.contains("checksum")), "{err}");
    }

    #[test]
    fn truncated_and_mislabeled_files_are_rejected() {
        let dir = tmpdir("badfiles");
        let path = dir.join("f.qga");
        save_field(&random_field(16, 12, 4), &path).unwrap();
        let raw = std::fs::read(&path).unwrap();

        std::fs::write(&path, &raw[..raw.len() - 9]).unwrap();
        let err = load_field::<f64>(&path, 1.0, 1.0).unwrap_err();
        assert!(matches!(err, Error::Format(ref m) if m.contains("truncated")), "{err}");

        let mut versioned = raw.clone();
        versioned[8] = 9;
        std::fs::write(&path, &versioned).unwrap();
        let err = load_field::<f64>(&path, 1.0, 1.0).unwrap_err();
        assert!(matches!(err, Error::Format(ref m) if m.contains("version")), "{err}");

        let mut magic = raw.clone();
        magic[0] = b'X';
        std::fs::write(&path, &magic).unwrap();
        let err = load_field::<f64>(&path, 1.0, 1.0).unwrap_err();
        assert!(matches!(err, Error::Format(ref m) if m.contains("magic")), "{err}");

        let err = load_sequence::<f64>(&path, 1.0, 1.0).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{err}");
    }

    #[test]
    fn sequence_frame_matches_separately_saved_field() {
        let dir = tmpdir("seq");
        let frames: Vec<Field2D<f64>> = (0..3).map(|i| random_field(20, 14, 100 + i)).collect();
        let seq_path = dir.join("seq.qga");
        let one_path = dir.join("frame0.qga");
        save_sequence(&frames, &seq_path).unwrap();
        save_field(&frames[0], &one_path).unwrap();
        let back = load_sequence::<f64>(&seq_path, 5500.0, 5500.0).unwrap();
        assert_eq!(back.len(), 3);
        let single = load_field::<f64>(&one_path, 5500.0, 5500.0).unwrap();
        assert_eq!(load_frame::<f64>(&seq_path, 0, 5500.0, 5500.0).unwrap(), single);
        for (a, b) in frames.iter().zip(back.iter()) {
            assert_eq!(a, b);
        }
        assert!(matches!(
            load_frame::<f64>(&seq_path, 3, 5500.0, 5500.0),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn csv_export_has_expected_layout() {
        let grid = GridSpec::new(8, 8, 1.0, 1.0).unwrap();
        let f = Field2D::from_fn(grid, |iy, ix| (iy * 8 + ix) as f64 * 0.5);
        let csv = field_to_csv(&f);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("y,x,value"));
        assert_eq!(lines.next(), Some("0,0,0.0"));
        assert_eq!(lines.next(), Some("0,1,0.5"));
        assert_eq!(csv.lines().count(), 1 + 64);
        assert!(csv.lines().last().unwrap().starts_with("7,7,"));
    }

    #[test]
    fn filter_component_round_trip_is_bit_exact() {
        let dir = tmpdir("comp-filter");
        let path = dir.join("filter.qgp");
        let model =
            VelocityModel::TrainableFilter(GradientFilterParams::<f64>::random_init(5, 0.3));
        export_component(&model, &path).unwrap();
        let back = import_component::<f64>(&path).unwrap();
        let (VelocityModel::TrainableFilter(a), VelocityModel::TrainableFilter(b)) =
            (&model, &back)
        else {
            panic!("wrong variant after import");
        };
        for (x, y) in a.weights().data().iter().zip(b.weights().data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn convnet_component_round_trip_is_bit_exact() {
        let dir = tmpdir("comp-convnet");
        let path = dir.join("net.qgp");
        let mut cp = ConvNetParams::<f64>::new(7);
        cp.set_gate(0.37);
        cp.set_input_normalization(0.01, 0.2).unwrap();
        cp.bn_momentum = 0.25;
        let model = VelocityModel::QgPlusConvNet(cp);
        export_component(&model, &path).unwrap();
        let back = import_component::<f64>(&path).unwrap();
        let (VelocityModel::QgPlusConvNet(a), VelocityModel::QgPlusConvNet(b)) = (&model, &back)
        else {
            panic!("wrong variant after import");
        };
        assert_eq!(a.store().len(), b.store().len());
        for (ea, eb) in a.store().entries().iter().zip(b.store().entries()) {
            assert_eq!(ea.name, eb.name);
            assert_eq!(ea.trainable, eb.trainable);
            assert_eq!(ea.value.shape(), eb.value.shape());
            for (x, y) in ea.value.data().iter().zip(eb.value.data()) {
                assert_eq!(x.to_bits(), y.to_bits(), "entry {}", ea.name);
            }
        }
        assert_eq!(a.bn_eps, b.bn_eps);
        assert_eq!(a.bn_momentum, b.bn_momentum);
        assert_eq!(a.leaky_slope, b.leaky_slope);
    }

    #[test]
    fn zero_gate_import_behaves_like_the_fixed_model() {
        let dir = tmpdir("comp-gate");
        let path = dir.join("net.qgp");
        export_component(&VelocityModel::QgPlusConvNet(ConvNetParams::<f64>::new(3)), &path)
            .unwrap();
        let back = import_component::<f64>(&path).unwrap();
        let h = random_field(16, 12, 9);
        let p = PhysicalParams::default();
        let (u0, v0) = VelocityModel::FixedQg.velocities(&h, &p).unwrap();
        let (u1, v1) = back.velocities(&h, &p).unwrap();
        assert_eq!(u0.linf_diff(&u1), 0.0);
        assert_eq!(v0.linf_diff(&v1), 0.0);
    }

    #[test]
    fn component_import_rejects_tampering() {
        let dir = tmpdir("comp-bad");
        let path = dir.join("filter.qgp");
        let model = VelocityModel::TrainableFilter(GradientFilterParams::<f64>::qg_init());
        export_component(&model, &path).unwrap();
        let raw = std::fs::read(&path).unwrap();

        let mut flipped = raw.clone();
        let i = flipped.len() - 12;
        flipped[i] ^= 0x40;
        std::fs::write(&path, &flipped).unwrap();
        let err = import_component::<f64>(&path).unwrap_err();
        assert!(matches!(err, Error::Format(ref m) if m.contains("checksum")), "{err}");

        // Same table under the ConvNet kind tag: the filter tensor is not a
        // ConvNet parameter set.
        let body_and_crc = &raw[12..];
        let mut rekinded = raw[..12].to_vec();
        let mut body = body_and_crc[..body_and_crc.len() - 4].to_vec();
        body[0] = 2;
        let crc = crc32(&body);
        rekinded.extend_from_slice(&body);
        put_u32(&mut rekinded, crc);
        std::fs::write(&path, &rekinded).unwrap();
        let err = import_component::<f64>(&path).unwrap_err();
        assert!(matches!(err, Error::Format(ref m) if m.contains("missing tensor")), "{err}");

        assert!(matches!(
            export_component(&VelocityModel::<f64>::FixedQg, &dir.join("none.qgp")),
            Err(Error::Usage(_))
        ));
    }

    fn small_synthetic_config() -> SyntheticConfig<f64> {
        SyntheticConfig {
            grid: GridSpec::new(24, 16, 5500.0, 5500.0).unwrap(),
            physics: PhysicalParams::default(),
            step: StepConfig {
                dt: 600.0,
                n_steps: 6,
                cfl_max: 0.5,
            },
            cg: CGConfig::default(),
            generator: GeneratorConfig {
                n_eddies_min: 2,
                n_eddies_max: 3,
                amp_min: 0.05,
                amp_max: 0.15,
                radius_min: 15_000.0,
                radius_max: 30_000.0,
                spinup_days: 1,
                kappa: 0.0,
                train_count: 3,
                test_count: 2,
                gap_days: 2,
            },
        }
    }

    #[test]
    fn manifest_text_round_trips() {
        let dir = tmpdir("manifest");
        let cfg = small_synthetic_config();
        let manifest = generate_synthetic(&cfg, 42, &dir).unwrap();
        let text = manifest.to_text();
        let back = DatasetManifest::<f64>::from_text(&text).unwrap();
        assert_eq!(manifest, back);
        assert_eq!(back.to_text(), text);
        let loaded = DatasetManifest::<f64>::load(&dir.join(MANIFEST_FILE)).unwrap();
        assert_eq!(loaded, manifest);
    }

    #[test]
    fn manifest_parser_rejects_malformed_input() {
        let cfg = small_synthetic_config();
        let dir = tmpdir("manifest-bad");
        let manifest = generate_synthetic(&cfg, 1, &dir).unwrap();
        let text = manifest.to_text();

        let err = DatasetManifest::<f64>::from_text("").unwrap_err();
        assert!(matches!(err, Error::Format(ref m) if m.contains("empty")), "{err}");

        let err =
            DatasetManifest::<f64>::from_text(&text.replace("v1", "v9")).unwrap_err();
        assert!(matches!(err, Error::Format(ref m) if m.contains("header")), "{err}");

        let err =
            DatasetManifest::<f64>::from_text(&text.replace("nx = ", "qx = ")).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{err}");

        let err =
            DatasetManifest::<f64>::from_text(&text.replace("[cg]", "[cranky]")).unwrap_err();
        assert!(matches!(err, Error::Format(ref m) if m.contains("unknown section")), "{err}");

        let err = DatasetManifest::<f64>::from_text(&text.replace(" train ", " dev "))
            .unwrap_err();
        assert!(matches!(err, Error::Format(ref m) if m.contains("role")), "{err}");
    }

    #[test]
    fn generated_dataset_validates_and_loads() {
        let dir = tmpdir("gen");
        let cfg = small_synthetic_config();
        let manifest = generate_synthetic(&cfg, 42, &dir).unwrap();
        assert_eq!(manifest.samples.len(), 5);
        let offsets: Vec<f64> = manifest.samples.iter().map(|r| r.t_offset_days).collect();
        assert_eq!(offsets, vec![0.0, 1.0, 2.0, 5.0, 6.0]);
        manifest.validate(&dir).unwrap();
        let train = manifest.load_role(&dir, Role::Train).unwrap();
        let test = manifest.load_role(&dir, Role::Test).unwrap();
        assert_eq!(train.len(), 3);
        assert_eq!(test.len(), 2);
        // Consecutive training pairs chain: target of one is the next h0.
        assert_eq!(train[0].target, train[1].h0);
        for s in train.iter().chain(test.iter()) {
            assert!(s.sigma > 0.0);
        }
    }

    #[test]
    fn same_seed_yields_byte_identical_files() {
        let cfg = small_synthetic_config();
        let (da, db) = (tmpdir("det-a"), tmpdir("det-b"));
        generate_synthetic(&cfg, 7, &da).unwrap();
        generate_synthetic(&cfg, 7, &db).unwrap();
        let mut names: Vec<String> = std::fs::read_dir(&da)
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        names.sort();
        assert_eq!(names.len(), 11, "manifest plus two files per sample");
        for name in names {
            let a = std::fs::read(da.join(&name)).unwrap();
            let b = std::fs::read(db.join(&name)).unwrap();
            assert_eq!(a, b, "file {name} differs between identical runs");
        }
    }

    #[test]
    fn zero_eddies_are_rejected_as_constant_targets() {
        let mut cfg = small_synthetic_config();
        cfg.generator.n_eddies_min = 0;
        cfg.generator.n_eddies_max = 0;
        let dir = tmpdir("zero");
        let err = generate_synthetic(&cfg, 3, &dir).unwrap_err();
        assert!(matches!(err, Error::Data(ref m) if m.contains("constant target")), "{err}");
    }

    #[test]
    fn pure_qg_dataset_is_self_consistent() {
        let dir = tmpdir("selfcons");
        let cfg = small_synthetic_config();
        let manifest = generate_synthetic(&cfg, 42, &dir).unwrap();
        let train = manifest.load_role(&dir, Role::Train).unwrap();
        let s = &train[0];
        let fc = integrate_day(
            &s.h0,
            &VelocityModel::FixedQg,
            &manifest.physics,
            &manifest.step,
            &manifest.cg,
        )
        .unwrap();
        let forecast_rmse = fc.h.rmse_to(&s.target);
        let persistence_rmse = s.h0.rmse_to(&s.target);
        assert!(persistence_rmse > 0.0);
        assert!(
            forecast_rmse < 1e-3 * persistence_rmse,
            "forecast {forecast_rmse} vs persistence {persistence_rmse}"
        );
        assert_eq!(forecast_rmse, 0.0, "same model and config must reproduce targets");
    }

    #[test]
    fn perturbed_dataset_departs_from_pure_qg() {
        let dir = tmpdir("kappa");
        let mut cfg = small_synthetic_config();
        cfg.generator.kappa = 0.05;
        let manifest = generate_synthetic(&cfg, 42, &dir).unwrap();
        let train = manifest.load_role(&dir, Role::Train).unwrap();
        let s = &train[0];
        let fc = integrate_day(
            &s.h0,
            &VelocityModel::FixedQg,
            &manifest.physics,
            &manifest.step,
            &manifest.cg,
        )
        .unwrap();
        let qg_rmse = fc.h.rmse_to(&s.target);
        let persistence_rmse = s.h0.rmse_to(&s.target);
        assert!(qg_rmse > 0.0, "kappa-perturbed targets must differ from pure QG");
        assert!(qg_rmse < persistence_rmse, "QG should still beat persistence");
    }

    #[test]
    fn validation_catches_missing_corrupt_and_overlapping_data() {
        let dir = tmpdir("validate");
        let cfg = small_synthetic_config();
        let manifest = generate_synthetic(&cfg, 9, &dir).unwrap();

        let mut overlapping = manifest.clone();
        overlapping.samples.last_mut().unwrap().t_offset_days = 2.5;
        let err = overlapping.validate(&dir).unwrap_err();
        assert!(matches!(err, Error::Data(ref m) if m.contains("overlap")), "{err}");

        let victim = dir.join(&manifest.samples[1].target_file);
        let mut raw = std::fs::read(&victim).unwrap();
        let i = raw.len() - 24;
        raw[i] ^= 0x10;
        std::fs::write(&victim, &raw).unwrap();
        let err = manifest.validate(&dir).unwrap_err();
        assert!(matches!(err, Error::Format(ref m) if m.contains("checksum")), "{err}");

        std::fs::remove_file(&victim).unwrap();
        let err = manifest.validate(&dir).unwrap_err();
        assert!(matches!(err, Error::Data(ref m) if m.contains("missing file")), "{err}");
    }
}
