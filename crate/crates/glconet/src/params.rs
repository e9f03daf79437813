//! Parameter containers, initialization and the named-tensor checkpoint
//! archive (name string + TNSR payload per tensor).

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::kernels::ConvSpec;
use crate::tensor::{Tensor, DTYPE_F64};

/// Walks every named parameter tensor of a module tree.
pub trait ParamVisitor {
    fn visit(&mut self, name: &str, t: &mut Tensor);
}

impl<F: FnMut(&str, &mut Tensor)> ParamVisitor for F {
    fn visit(&mut self, name: &str, t: &mut Tensor) {
        self(name, t)
    }
}

/// Kaiming-uniform fan-in init for conv weights.
pub fn kaiming_uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.gen_range(-bound..bound);
    }
    t
}

// ── Conv / LayerNorm parameter bundles ───────────────────────────────

#[derive(Clone, Debug)]
pub struct Conv2dParams {
    pub weight: Tensor,
    pub bias: Tensor,
    pub spec: ConvSpec,
}

impl Conv2dParams {
    pub fn new(spec: ConvSpec, rng: &mut ChaCha8Rng) -> Self {
        let weight = kaiming_uniform(&spec.weight_shape(), spec.fan_in(), rng);
        let bias = Tensor::zeros(&[spec.out_ch]);
        Conv2dParams { weight, bias, spec }
    }

    pub fn forward(&self, g: &mut Graph, prefix: &str, x: NodeId) -> Result<NodeId> {
        let w = g.param(&format!("{prefix}.weight"), &self.weight);
        let b = g.param(&format!("{prefix}.bias"), &self.bias);
        g.conv2d(x, w, Some(b), &self.spec)
    }

    pub fn visit(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        v.visit(&format!("{prefix}.weight"), &mut self.weight);
        v.visit(&format!("{prefix}.bias"), &mut self.bias);
    }
}

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gain: Tensor,
    pub offset: Tensor,
}

impl LayerNormParams {
    pub fn new(channels: usize) -> Self {
        LayerNormParams { gain: Tensor::ones(&[channels]), offset: Tensor::zeros(&[channels]) }
    }

    pub fn forward(&self, g: &mut Graph, prefix: &str, x: NodeId) -> Result<NodeId> {
        let gain = g.param(&format!("{prefix}.gain"), &self.gain);
        let offset = g.param(&format!("{prefix}.offset"), &self.offset);
        g.layer_norm(x, gain, offset)
    }

    pub fn visit(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        v.visit(&format!("{prefix}.gain"), &mut self.gain);
        v.visit(&format!("{prefix}.offset"), &mut self.offset);
    }
}

// ── Checkpoint archive ───────────────────────────────────────────────

/// Ordered name -> tensor map serialized as repeated
/// (u32 LE name length, UTF-8 name, TNSR blob) records.
#[derive(Clone, Debug, Default)]
pub struct TensorArchive {
    entries: BTreeMap<String, Tensor>,
}

impl TensorArchive {
    pub fn new() -> Self {
        TensorArchive::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.entries.remove(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        for (name, t) in &self.entries {
            let bytes = name.as_bytes();
            w.write_all(&(bytes.len() as u32).to_le_bytes())?;
            w.write_all(bytes)?;
            t.write_tnsr(w, DTYPE_F64)?;
        }
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        let mut entries = BTreeMap::new();
        loop {
            let mut len_buf = [0u8; 4];
            match r.read_exact(&mut len_buf) {
                Ok(()) => {}
                Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
                Err(e) => return Err(e.into()),
            }
            let len = u32::from_le_bytes(len_buf) as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Data("non-UTF8 tensor name in archive".into()))?;
            let t = Tensor::read_tnsr(r)?;
            entries.insert(name, t);
        }
        Ok(TensorArchive { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut f)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(
            std::fs::File::open(path).map_err(|e| Error::Data(format!("checkpoint {}: {e}", path.display())))?,
        );
        TensorArchive::read(&mut f)
    }
}

/// Collects a module tree into an archive.
pub fn collect_params<M>(module: &mut M, visit: impl Fn(&mut M, &mut dyn ParamVisitor)) -> TensorArchive {
    let mut archive = TensorArchive::new();
    let mut collector = |name: &str, t: &mut Tensor| {
        archive.insert(name, t.clone());
    };
    visit(module, &mut collector);
    archive
}

/// Replaces a module tree's tensors from an archive, validating names and
/// shapes. Returns the list of archive entries that were not consumed.
pub fn load_params<M>(
    module: &mut M,
    archive: &TensorArchive,
    visit: impl Fn(&mut M, &mut dyn ParamVisitor),
) -> Result<Vec<String>> {
    let mut mismatches: Vec<String> = Vec::new();
    let mut used: Vec<String> = Vec::new();
    {
        let mut loader = |name: &str, t: &mut Tensor| match archive.get(name) {
            None => mismatches.push(format!("missing: {name} {:?}", t.shape())),
            Some(src) if src.shape() != t.shape() => {
                mismatches.push(format!("shape: {name} expected {:?}, checkpoint has {:?}", t.shape(), src.shape()))
            }
            Some(src) => {
                *t = src.clone();
                used.push(name.to_string());
            }
        };
        visit(module, &mut loader);
    }
    if !mismatches.is_empty() {
        return Err(Error::Data(format!("checkpoint mismatch:\n  {}", mismatches.join("\n  "))));
    }
    let unused = archive.names().filter(|n| !used.contains(n)).cloned().collect();
    Ok(unused)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn archive_round_trip() {
        let mut a = TensorArchive::new();
        a.insert("alpha.weight", Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        a.insert("beta", Tensor::scalar(7.5));
        let mut buf = Vec::new();
        a.write(&mut buf).unwrap();
        let b = TensorArchive::read(&mut buf.as_slice()).unwrap();
        assert_eq!(b.len(), 2);
        assert_eq!(b.get("beta").unwrap().item(), 7.5);
        assert_eq!(b.get("alpha.weight").unwrap().data(), a.get("alpha.weight").unwrap().data());
    }

    #[test]
    fn kaiming_bound_respected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = kaiming_uniform(&[8, 4, 3, 3], 36, &mut rng);
        let bound = (6.0 / 36.0f64).sqrt();
        for &v in t.data() {
            assert!(v.abs() <= bound);
        }
    }

    #[test]
    fn load_reports_shape_mismatch_by_name() {
        struct M {
            conv: Conv2dParams,
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut m = M { conv: Conv2dParams::new(ConvSpec::same(2, 2, 3), &mut rng) };
        let mut bad = TensorArchive::new();
        bad.insert("net.weight", Tensor::zeros(&[2, 2, 1, 1]));
        bad.insert("net.bias", Tensor::zeros(&[2]));
        let err = load_params(&mut m, &bad, |m, v| m.conv.visit("net", v)).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("net.weight"), "{msg}");
    }
}
