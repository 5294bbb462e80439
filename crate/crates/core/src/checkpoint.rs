//! Binary model container: a `SIMW` header with the architecture, then one
//! named record per parameter tensor. All integers are little-endian `u32`,
//! values are little-endian `f64`.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::{Param, ParameterSet, SimOn};
use crate::tensor::Tensor;
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SIMW";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save(path: impl AsRef<Path>, model: &SimOn) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_to(&mut w, model)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<SimOn> {
    read_from(&mut BufReader::new(File::open(path)?))
}

fn u32_of(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Input(format!("{what} {v} does not fit in u32")))
}

pub fn write_to<W: Write>(w: &mut W, model: &SimOn) -> Result<()> {
    let c = &model.config;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    for (v, what) in [
        (c.d_model, "d_model"),
        (c.d_in, "d_in"),
        (c.classes, "classes"),
        (c.heads, "heads"),
        (c.blocks, "blocks"),
        (c.k, "k"),
    ] {
        w.write_all(&u32_of(v, what)?.to_le_bytes())?;
    }
    w.write_all(&c.threshold.to_le_bytes())?;
    for (v, what) in [(c.d_mid, "d_mid"), (c.d_c, "d_c"), (c.chunk_len, "chunk_len")] {
        w.write_all(&u32_of(v, what)?.to_le_bytes())?;
    }
    w.write_all(&c.fps.to_le_bytes())?;

    let mut records = Vec::new();
    model.params.for_each(&mut |name, p| records.push((name.to_string(), &p.value)));
    w.write_all(&u32_of(records.len(), "record count")?.to_le_bytes())?;
    for (name, t) in records {
        w.write_all(&u32_of(name.len(), "name length")?.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&u32_of(t.shape().len(), "rank")?.to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&u32_of(d, "extent")?.to_le_bytes())?;
        }
        for &x in t.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

struct Cursor<'r, R> {
    inner: &'r mut R,
    offset: u64,
}

impl<R: Read> Cursor<'_, R> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                Error::format(self.offset, format!("truncated while reading {what}"))
            } else {
                e.into()
            }
        })?;
        self.offset += n as u64;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.bytes(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        let b = self.bytes(8, what)?;
        Ok(f64::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn read_from<R: Read>(r: &mut R) -> Result<SimOn> {
    let mut cur = Cursor { inner: r, offset: 0 };
    if cur.bytes(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::format(0, "bad magic, expected SIMW"));
    }
    let version = cur.u32("version")?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(Error::format(4, format!("unsupported checkpoint version {version}")));
    }
    let mut config = ModelConfig {
        d_model: cur.u32("d_model")?,
        d_in: cur.u32("d_in")?,
        classes: cur.u32("classes")?,
        heads: cur.u32("heads")?,
        blocks: cur.u32("blocks")?,
        k: cur.u32("k")?,
        ..ModelConfig::default()
    };
    config.threshold = cur.f64("threshold")?;
    config.d_mid = cur.u32("d_mid")?;
    config.d_c = cur.u32("d_c")?;
    config.chunk_len = cur.u32("chunk_len")?;
    config.fps = cur.f64("fps")?;
    config
        .validate()
        .map_err(|e| Error::format(cur.offset, format!("bad header: {e}")))?;

    let count = cur.u32("record count")?;
    let mut records: HashMap<String, Tensor> = HashMap::with_capacity(count);
    for _ in 0..count {
        let at = cur.offset;
        let len = cur.u32("name length")?;
        let name = String::from_utf8(cur.bytes(len, "name")?)
            .map_err(|_| Error::format(at, "parameter name is not UTF-8"))?;
        let rank = cur.u32("rank")?;
        let shape = (0..rank).map(|_| cur.u32("extent")).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().product::<usize>();
        let raw = cur.bytes(8 * n, "values")?;
        let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::format(at, format!("{name}: {e}")))?;
        if records.insert(name.clone(), t).is_some() {
            return Err(Error::format(at, format!("duplicate record {name}")));
        }
    }

    let mut params = ParameterSet::init(&config, 0)?;
    let mut missing = None;
    params.for_each_mut(&mut |name, p: &mut Param| match records.remove(name) {
        Some(t) if t.shape() == p.value.shape() => *p = Param::new(t),
        _ => {
            missing.get_or_insert_with(|| name.to_string());
        }
    });
    if let Some(name) = missing {
        return Err(Error::format(cur.offset, format!("record {name} missing or misshapen")));
    }
    if let Some(name) = records.keys().next() {
        return Err(Error::format(cur.offset, format!("unexpected record {name}")));
    }
    SimOn::from_parts(config, params)
}
