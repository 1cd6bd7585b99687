//! Binary instance container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! bytes 0..8    magic "OSCMINST"
//! bytes 8..12   format version (u32, currently 1)
//! bytes 12..20  header length in bytes (u64)
//! ...           header: UTF-8 JSON {name, kind, params, arrays}
//! ...           payload: the arrays listed in the header, row-major f64 LE,
//!               back to back in header order
//! ```
//!
//! The header's `arrays` entries give `{name, rows, cols}` for each payload
//! block. Scalars and small parameter vectors live in `params` as JSON
//! numbers (serde_json round-trips finite f64 exactly). Loading rebuilds the
//! oracle from the stored sample arrays, so loaded instances evaluate
//! bit-identically to the originals.

use std::fs::File;
use std::io::{self, Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::linalg::Matrix;
use crate::par::ExecMode;

use super::{cvar, density, kelly, newsvendor, DensityRegularizer, InstanceKind, ProblemInstance};

const MAGIC: &[u8; 8] = b"OSCMINST";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ArrayMeta {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    name: String,
    kind: String,
    params: serde_json::Value,
    arrays: Vec<ArrayMeta>,
}

fn bad(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

struct Writer<'f> {
    metas: Vec<ArrayMeta>,
    blocks: Vec<&'f [f64]>,
}

impl<'f> Writer<'f> {
    fn new() -> Self {
        Writer { metas: Vec::new(), blocks: Vec::new() }
    }

    fn push(&mut self, name: &str, rows: usize, cols: usize, data: &'f [f64]) {
        assert_eq!(rows * cols, data.len());
        self.metas.push(ArrayMeta { name: name.to_string(), rows, cols });
        self.blocks.push(data);
    }

    fn push_vec(&mut self, name: &str, data: &'f [f64]) {
        self.push(name, 1, data.len(), data);
    }
}

pub fn save_instance(inst: &ProblemInstance, path: impl AsRef<Path>) -> io::Result<()> {
    let mut w = Writer::new();
    let (kind, params) = match &inst.kind {
        InstanceKind::Kelly(d) => {
            w.push_vec("pi", &d.pi);
            w.push_vec("rbar", &d.rbar);
            w.push("returns", d.returns.rows(), d.returns.cols(), d.returns.data());
            w.push_vec("x0", &inst.x0);
            ("kelly", serde_json::json!({"n": d.n, "num_samples": d.num_samples, "seed": d.seed}))
        }
        InstanceKind::Cvar(d) => {
            w.push("returns", d.returns.rows(), d.returns.cols(), d.returns.data());
            w.push_vec("strike_call", &d.strike_call);
            w.push_vec("strike_put", &d.strike_put);
            w.push_vec("premium_call", &d.premium_call);
            w.push_vec("premium_put", &d.premium_put);
            w.push_vec("x0", &inst.x0);
            (
                "cvar",
                serde_json::json!({
                    "m": d.m, "num_samples": d.num_samples, "seed": d.seed,
                    "eta": d.eta, "x_min": d.x_min, "leverage": d.leverage
                }),
            )
        }
        InstanceKind::Density(d) => {
            w.push("data_z", d.data_z.rows(), d.data_z.cols(), d.data_z.data());
            w.push_vec("x0", &inst.x0);
            let reg = match d.regularizer {
                DensityRegularizer::L2 => "l2",
                DensityRegularizer::Grad => "grad",
            };
            (
                "density",
                serde_json::json!({
                    "n_grid": d.n_grid, "m_data": d.m_data, "seed": d.seed,
                    "lambda": d.lambda, "regularizer": reg
                }),
            )
        }
        InstanceKind::NewsVendor(d) => {
            w.push("demand", d.demand.rows(), d.demand.cols(), d.demand.data());
            w.push("price", d.price.rows(), d.price.cols(), d.price.data());
            w.push_vec("cost_lin", &d.cost_lin);
            w.push_vec("cost_kink", &d.cost_kink);
            w.push_vec("x0", &inst.x0);
            (
                "newsvendor",
                serde_json::json!({
                    "n": d.n, "num_samples": d.num_samples, "seed": d.seed,
                    "eta": d.eta, "budget": d.budget
                }),
            )
        }
    };
    let header = Header {
        name: inst.name.clone(),
        kind: kind.to_string(),
        params,
        arrays: w.metas,
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut f = File::create(path)?;
    f.write_all(MAGIC)?;
    f.write_all(&VERSION.to_le_bytes())?;
    f.write_all(&(header_json.len() as u64).to_le_bytes())?;
    f.write_all(&header_json)?;
    for block in w.blocks {
        let mut buf = Vec::with_capacity(block.len() * 8);
        for v in block {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        f.write_all(&buf)?;
    }
    Ok(())
}

struct Reader {
    header: Header,
    arrays: Vec<Vec<f64>>,
}

impl Reader {
    fn take(&self, name: &str) -> io::Result<(usize, usize, &[f64])> {
        for (meta, data) in self.header.arrays.iter().zip(&self.arrays) {
            if meta.name == name {
                return Ok((meta.rows, meta.cols, data));
            }
        }
        Err(bad(format!("array {name} missing from container")))
    }

    fn matrix(&self, name: &str) -> io::Result<Matrix> {
        let (rows, cols, data) = self.take(name)?;
        Ok(Matrix::from_fn(rows, cols, |i, j| data[i * cols + j]))
    }

    fn vector(&self, name: &str) -> io::Result<Vec<f64>> {
        Ok(self.take(name)?.2.to_vec())
    }

    fn param_u64(&self, name: &str) -> io::Result<u64> {
        self.header.params.get(name).and_then(|v| v.as_u64()).ok_or_else(|| bad(format!("parameter {name}")))
    }

    fn param_f64(&self, name: &str) -> io::Result<f64> {
        self.header.params.get(name).and_then(|v| v.as_f64()).ok_or_else(|| bad(format!("parameter {name}")))
    }
}

pub fn load_instance(path: impl AsRef<Path>) -> io::Result<ProblemInstance> {
    let mut f = File::open(path)?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("not an instance container"));
    }
    let mut word = [0u8; 4];
    f.read_exact(&mut word)?;
    if u32::from_le_bytes(word) != VERSION {
        return Err(bad("unsupported container version"));
    }
    let mut len = [0u8; 8];
    f.read_exact(&mut len)?;
    let header_len = u64::from_le_bytes(len) as usize;
    let mut header_buf = vec![0u8; header_len];
    f.read_exact(&mut header_buf)?;
    let header: Header = serde_json::from_slice(&header_buf)?;
    let mut arrays = Vec::with_capacity(header.arrays.len());
    for meta in &header.arrays {
        let count = meta.rows * meta.cols;
        let mut buf = vec![0u8; count * 8];
        f.read_exact(&mut buf)?;
        let mut data = Vec::with_capacity(count);
        for chunk in buf.chunks_exact(8) {
            data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        arrays.push(data);
    }
    let r = Reader { header, arrays };

    let mut inst = match r.header.kind.as_str() {
        "kelly" => {
            let data = kelly::KellyData {
                n: r.param_u64("n")? as usize,
                num_samples: r.param_u64("num_samples")? as usize,
                seed: r.param_u64("seed")?,
                pi: r.vector("pi")?,
                rbar: r.vector("rbar")?,
                returns: r.matrix("returns")?,
                exec: ExecMode::default(),
            };
            kelly::build_instance(data)
        }
        "cvar" => {
            let data = cvar::CvarData {
                m: r.param_u64("m")? as usize,
                num_samples: r.param_u64("num_samples")? as usize,
                seed: r.param_u64("seed")?,
                eta: r.param_f64("eta")?,
                x_min: r.param_f64("x_min")?,
                leverage: r.param_f64("leverage")?,
                returns: r.matrix("returns")?,
                strike_call: r.vector("strike_call")?,
                strike_put: r.vector("strike_put")?,
                premium_call: r.vector("premium_call")?,
                premium_put: r.vector("premium_put")?,
                exec: ExecMode::default(),
            };
            cvar::build_instance(data)
        }
        "density" => {
            let n_grid = r.param_u64("n_grid")? as usize;
            let reg = match r.header.params.get("regularizer").and_then(|v| v.as_str()) {
                Some("l2") => DensityRegularizer::L2,
                Some("grad") => DensityRegularizer::Grad,
                _ => return Err(bad("regularizer")),
            };
            let side = (n_grid as f64).sqrt().round() as usize;
            if side * side != n_grid {
                return Err(bad("grid size is not a perfect square"));
            }
            // The lattice statistics are a pure function of the grid size.
            let regenerated = density::generate_data(n_grid, 1, 0, 0.0, reg, ExecMode::default());
            let data = density::DensityData {
                n_grid,
                m_data: r.param_u64("m_data")? as usize,
                seed: r.param_u64("seed")?,
                lambda: r.param_f64("lambda")?,
                regularizer: reg,
                data_z: r.matrix("data_z")?,
                phi_grid: regenerated.phi_grid,
                exec: ExecMode::default(),
            };
            density::build_instance(data)
        }
        "newsvendor" => {
            let data = newsvendor::NewsVendorData {
                n: r.param_u64("n")? as usize,
                num_samples: r.param_u64("num_samples")? as usize,
                seed: r.param_u64("seed")?,
                eta: r.param_f64("eta")?,
                budget: r.param_f64("budget")?,
                demand: r.matrix("demand")?,
                price: r.matrix("price")?,
                cost_lin: r.vector("cost_lin")?,
                cost_kink: r.vector("cost_kink")?,
                q_max: r.vector("cost_kink")?.iter().map(|b| 5.0 * b).collect(),
                exec: ExecMode::default(),
            };
            newsvendor::build_instance(data)
        }
        other => return Err(bad(format!("unknown kind {other}"))),
    };
    inst.name = r.header.name.clone();
    inst.x0 = r.vector("x0")?;
    Ok(inst)
}

/// Arc out of a loaded instance kind (test helper for recomputation checks).
impl ProblemInstance {
    pub fn kelly_data(&self) -> Option<Arc<kelly::KellyData>> {
        match &self.kind {
            InstanceKind::Kelly(d) => Some(d.clone()),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::{gen_density, gen_kelly, gen_newsvendor, DensityRegularizer};
    use super::*;
    use crate::rng::StreamRng;

    #[test]
    fn kelly_round_trip_bit_identical() {
        let dir = std::env::temp_dir().join("oscmin_io_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("kelly.inst");
        let orig = gen_kelly(6, 400, 11);
        save_instance(&orig, &path).unwrap();
        let loaded = load_instance(&path).unwrap();
        assert_eq!(orig.x0, loaded.x0);
        let mut rng = StreamRng::new(1, 0);
        for _ in 0..5 {
            let x = orig.sample_interior(&mut rng);
            let a = orig.oracle.evaluate(&x).unwrap();
            let b = loaded.oracle.evaluate(&x).unwrap();
            assert_eq!(a.value.to_bits(), b.value.to_bits());
            for (u, v) in a.gradient.unwrap().iter().zip(b.gradient.unwrap()) {
                assert_eq!(u.to_bits(), v.to_bits());
            }
        }
    }

    #[test]
    fn density_and_newsvendor_round_trip() {
        let dir = std::env::temp_dir().join("oscmin_io_test");
        std::fs::create_dir_all(&dir).unwrap();
        for (inst, file) in [
            (gen_density(100, 60, 3, 0.2, DensityRegularizer::Grad), "d.inst"),
            (gen_newsvendor(4, 150, 5), "nv.inst"),
        ] {
            let path = dir.join(file);
            save_instance(&inst, &path).unwrap();
            let loaded = load_instance(&path).unwrap();
            assert_eq!(inst.x0, loaded.x0);
            let e0 = inst.oracle.evaluate(&inst.x0).unwrap();
            let e1 = loaded.oracle.evaluate(&loaded.x0).unwrap();
            assert_eq!(e0.value.to_bits(), e1.value.to_bits());
        }
    }

    #[test]
    fn garbage_file_rejected() {
        let dir = std::env::temp_dir().join("oscmin_io_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("garbage.inst");
        std::fs::write(&path, b"definitely not an instance").unwrap();
        assert!(load_instance(&path).is_err());
    }
}
