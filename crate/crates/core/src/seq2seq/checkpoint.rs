//! Binary checkpoint format.
//!
//! ```text
//! DIVG1
//! num_layers <n>
//! hidden <n>
//! embed <n>
//! vocab_size <n>
//! max_len <n>
//! use_attention <0|1>
//! seed <n>
//! <name>
//! <rank> <dim> ... <dim>
//! <little-endian f64 payload>
//! ... one block per parameter, to end of file
//! ```

use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::numcore::Tensor;

const MAGIC: &str = "DIVG1";

pub fn write_checkpoint(params: &ModelParams) -> Vec<u8> {
    let c = params.config();
    let mut out = format!(
        "{MAGIC}\nnum_layers {}\nhidden {}\nembed {}\nvocab_size {}\nmax_len {}\nuse_attention {}\nseed {}\n",
        c.num_layers,
        c.hidden,
        c.embed,
        c.vocab_size,
        c.max_len,
        u8::from(c.use_attention),
        c.seed
    )
    .into_bytes();
    for (name, t) in params.iter() {
        out.extend_from_slice(name.as_bytes());
        out.push(b'\n');
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        out.extend_from_slice(format!("{} {}\n", t.rank(), dims.join(" ")).as_bytes());
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(path: &Path, params: &ModelParams) -> Result<()> {
    fs::write(path, write_checkpoint(params)).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.bytes[self.pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format(self.path, "truncated checkpoint"))?;
        self.pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| Error::format(self.path, "non-UTF-8 header text"))
    }

    fn field<T: std::str::FromStr>(&mut self, name: &str) -> Result<T> {
        let line = self.line()?;
        line.strip_prefix(name)
            .and_then(|v| v.strip_prefix(' '))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::format(self.path, format!("expected `{name} <value>`, got `{line}`")))
    }

    fn done(&self) -> bool {
        self.pos >= self.bytes.len()
    }
}

pub fn parse_checkpoint(bytes: &[u8], path: &Path) -> Result<ModelParams> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.line()? != MAGIC {
        return Err(Error::format(path, "missing DIVG1 header"));
    }
    let config = ModelConfig {
        num_layers: r.field("num_layers")?,
        hidden: r.field("hidden")?,
        embed: r.field("embed")?,
        vocab_size: r.field("vocab_size")?,
        max_len: r.field("max_len")?,
        use_attention: r.field::<u8>("use_attention")? == 1,
        seed: r.field("seed")?,
    };

    let mut tensors = IndexMap::new();
    while !r.done() {
        let name = r.line()?.to_string();
        let dims_line = r.line()?;
        let nums: Vec<usize> = dims_line
            .split(' ')
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::format(path, format!("bad dimension line `{dims_line}`")))?;
        let (rank, shape) = nums
            .split_first()
            .ok_or_else(|| Error::format(path, "empty dimension line"))?;
        if *rank != shape.len() {
            return Err(Error::format(path, format!("rank {rank} does not match dims {shape:?}")));
        }
        let n: usize = shape.iter().product();
        let end = r.pos + 8 * n;
        if end > bytes.len() {
            return Err(Error::format(path, format!("truncated payload for `{name}`")));
        }
        let data: Vec<f64> = bytes[r.pos..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        r.pos = end;
        let tensor = Tensor::new(shape.to_vec(), data).map_err(|e| Error::format(path, format!("`{name}`: {e}")))?;
        tensors.insert(name, tensor);
    }
    ModelParams::from_tensors(config, tensors).map_err(|e| Error::format(path, e.to_string()))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes, path)
}
