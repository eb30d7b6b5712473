//! Row-major tensors in working precision, with the binary `LPT1` file
//! format and a CSV fallback.
//!
//! Binary layout: magic `LPT1`, u8 rank, rank little-endian u32 dims, then
//! row-major little-endian IEEE f32 data. CSV carries one value per cell,
//! row-major, with a `# dims=d0,d1,...` header comment.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

const MAGIC: &[u8; 4] = b"LPT1";

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("dims {dims:?} imply {expected} elements, got {actual}")]
    LengthMismatch {
        dims: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("dims must be positive, got {0:?}")]
    ZeroDim(Vec<usize>),
    #[error("bad magic bytes (not an LPT1 file)")]
    BadMagic,
    #[error("value {0} does not fit in the f32 data section")]
    UnrepresentableInF32(f64),
    #[error("CSV tensor needs a `# dims=...` header comment")]
    MissingDims,
    #[error("cannot parse CSV cell `{0}`")]
    BadCell(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if dims.is_empty() || dims.contains(&0) {
            return Err(TensorError::ZeroDim(dims));
        }
        let expected: usize = dims.iter().product();
        if data.len() != expected {
            return Err(TensorError::LengthMismatch {
                dims,
                expected,
                actual: data.len(),
            });
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Result<Self, TensorError> {
        let n: usize = dims.iter().product();
        Tensor::new(dims, vec![0.0; n])
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<(), TensorError> {
        w.write_all(MAGIC)?;
        w.write_all(&[self.dims.len() as u8])?;
        for &d in &self.dims {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &x in &self.data {
            let v = x as f32;
            if !v.is_finite() && x.is_finite() {
                return Err(TensorError::UnrepresentableInF32(x));
            }
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self, TensorError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(TensorError::BadMagic);
        }
        let mut rank = [0u8; 1];
        r.read_exact(&mut rank)?;
        let mut dims = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            dims.push(u32::from_le_bytes(b) as usize);
        }
        let n: usize = dims.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            data.push(f64::from(f32::from_le_bytes(b)));
        }
        Tensor::new(dims, data)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<(), TensorError> {
        let dims: Vec<String> = self.dims.iter().map(|d| d.to_string()).collect();
        writeln!(w, "# dims={}", dims.join(","))?;
        let cols = *self.dims.last().unwrap();
        for row in self.data.chunks(cols) {
            let cells: Vec<String> = row.iter().map(|x| format!("{x}")).collect();
            writeln!(w, "{}", cells.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self, TensorError> {
        let mut dims: Option<Vec<usize>> = None;
        let mut data = Vec::new();
        for line in r.lines() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                let rest = rest.trim();
                if let Some(spec) = rest.strip_prefix("dims=") {
                    let parsed: Result<Vec<usize>, _> =
                        spec.split(',').map(|s| s.trim().parse()).collect();
                    dims = Some(parsed.map_err(|_| TensorError::BadCell(spec.to_string()))?);
                }
                continue;
            }
            for cell in line.split(',') {
                let cell = cell.trim();
                if cell.is_empty() {
                    continue;
                }
                data.push(
                    cell.parse::<f64>()
                        .map_err(|_| TensorError::BadCell(cell.to_string()))?,
                );
            }
        }
        let dims = dims.ok_or(TensorError::MissingDims)?;
        Tensor::new(dims, data)
    }

    /// Load from a path, sniffing LPT1 magic and falling back to CSV.
    pub fn load(path: &Path) -> Result<Self, TensorError> {
        let mut f = File::open(path)?;
        let mut magic = [0u8; 4];
        let got = f.read(&mut magic)?;
        drop(f);
        if got == 4 && &magic == MAGIC {
            Tensor::read_binary(BufReader::new(File::open(path)?))
        } else {
            Tensor::read_csv(BufReader::new(File::open(path)?))
        }
    }

    pub fn save_binary(&self, path: &Path) -> Result<(), TensorError> {
        self.write_binary(BufWriter::new(File::create(path)?))
    }
}
