//! Binary model checkpoints.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic "FLOWCKPT" | version u32 | D u32 | cond_width u32
//! family u8 | activation u8 | assignment u8 | batch_norm u8
//! K u32 | C u32 | L u32 | hidden widths L×u32 | seed u64 | order D×u32
//! layer count u32, then per layer: kind u8 and its descriptor
//! parameter count u32, then per parameter: length u64 and f64 values
//! batch-norm statistics: per batch-norm layer, flag u8 then m, v as D×f64 each
//! ```

use std::fs;
use std::path::Path;

use crate::conditioner::Activation;
use crate::error::{FlowError, Result};
use crate::flow::{Family, FlowModel, ModelSpec};
use crate::layers::{ArDirection, BnMode, Layer};
use crate::masking::{DegreeAssignment, Order};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"FLOWCKPT";
pub const VERSION: u32 = 1;

const KIND_AR: u8 = 0;
const KIND_COUPLING: u8 = 1;
const KIND_BN: u8 = 2;
const KIND_PERM: u8 = 3;

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
    fn indices(&mut self, idx: &[usize]) {
        self.u32(idx.len());
        idx.iter().for_each(|&i| self.u32(i));
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| FlowError::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| FlowError::Format("checkpoint length overflow".into()))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
    fn indices(&mut self) -> Result<Vec<usize>> {
        let n = self.u32()?;
        (0..n).map(|_| self.u32()).collect()
    }
}

fn describe(w: &mut Writer, layer: &Layer) {
    match layer {
        Layer::Autoregressive(l) => {
            w.u8(KIND_AR);
            w.u8(match l.direction() {
                ArDirection::Maf => 0,
                ArDirection::Iaf => 1,
            });
            w.indices(l.order().sequence());
        }
        Layer::Coupling(l) => {
            w.u8(KIND_COUPLING);
            w.indices(l.copied());
        }
        Layer::BatchNorm(_) => w.u8(KIND_BN),
        Layer::Permutation(l) => {
            w.u8(KIND_PERM);
            w.indices(l.order().sequence());
        }
    }
}

fn check_descriptor(r: &mut Reader, layer: &Layer, i: usize) -> Result<()> {
    let mismatch = || FlowError::Format(format!("checkpoint layer {i} does not match the rebuilt architecture"));
    let kind = r.u8()?;
    let ok = match layer {
        Layer::Autoregressive(l) => {
            let dir = r.u8()?;
            let want = if l.direction() == ArDirection::Maf { 0 } else { 1 };
            kind == KIND_AR && dir == want && r.indices()? == l.order().sequence()
        }
        Layer::Coupling(l) => kind == KIND_COUPLING && r.indices()? == l.copied(),
        Layer::BatchNorm(_) => kind == KIND_BN,
        Layer::Permutation(l) => kind == KIND_PERM && r.indices()? == l.order().sequence(),
    };
    if ok {
        Ok(())
    } else {
        Err(mismatch())
    }
}

pub fn to_bytes(model: &FlowModel) -> Vec<u8> {
    let spec = model.spec();
    let mut w = Writer::default();
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION as usize);
    w.u32(spec.dim);
    w.u32(spec.cond_width);
    w.u8(spec.family.code());
    w.u8(spec.activation.code());
    w.u8(spec.assignment.code());
    w.u8(spec.batch_norm as u8);
    w.u32(spec.flow_layers);
    w.u32(spec.components);
    w.indices(&spec.hidden);
    w.u64(spec.seed);
    spec.order.sequence().iter().for_each(|&i| w.u32(i));
    w.u32(model.layers().len());
    model.layers().iter().for_each(|l| describe(&mut w, l));
    w.u32(model.store.len());
    for p in model.store.iter() {
        w.u64(p.value.len() as u64);
        w.f64s(p.value.data());
    }
    for l in model.layers() {
        if let Layer::BatchNorm(b) = l {
            match b.stats() {
                Some((m, v)) => {
                    w.u8(1 + (b.mode() == BnMode::Eval) as u8);
                    w.f64s(m.data());
                    w.f64s(v.data());
                }
                None => w.u8(0),
            }
        }
    }
    w.0
}

pub fn from_bytes(buf: &[u8]) -> Result<FlowModel> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(FlowError::Format("not a model checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(FlowError::Format(format!("unsupported checkpoint version {version}")));
    }
    let dim = r.u32()?;
    let cond_width = r.u32()?;
    let family = Family::from_code(r.u8()?)?;
    let activation = Activation::from_code(r.u8()?)?;
    let assignment = DegreeAssignment::from_code(r.u8()?)?;
    let batch_norm = r.u8()? != 0;
    let flow_layers = r.u32()?;
    let components = r.u32()?;
    let hidden = r.indices()?;
    let seed = r.u64()?;
    let order = Order::from_sequence((0..dim).map(|_| r.u32()).collect::<Result<_>>()?)
        .map_err(|e| FlowError::Format(format!("checkpoint order: {e}")))?;
    let spec = ModelSpec {
        family,
        dim,
        flow_layers,
        hidden,
        components,
        cond_width,
        activation,
        assignment,
        batch_norm,
        order,
        seed,
    };
    let mut model = FlowModel::new(spec)?;
    let n_layers = r.u32()?;
    if n_layers != model.layers().len() {
        return Err(FlowError::Format(format!(
            "checkpoint has {n_layers} layers, architecture has {}",
            model.layers().len()
        )));
    }
    for (i, l) in model.layers().iter().enumerate() {
        check_descriptor(&mut r, l, i)?;
    }
    let n_params = r.u32()?;
    if n_params != model.store.len() {
        return Err(FlowError::Format(format!("checkpoint has {n_params} parameter blocks, expected {}", model.store.len())));
    }
    let mut values = Vec::with_capacity(n_params);
    for p in model.store.iter() {
        let len = r.u64()? as usize;
        if len != p.value.len() {
            return Err(FlowError::Format(format!("parameter {} has {len} values, expected {}", p.name, p.value.len())));
        }
        values.push(Tensor::new(p.value.shape().to_vec(), r.f64s(len)?)?);
    }
    model.store.restore(&values)?;
    for b in model.batch_norms_mut() {
        let flag = r.u8()?;
        if flag > 0 {
            let m = Tensor::vector(r.f64s(dim)?);
            let v = Tensor::vector(r.f64s(dim)?);
            b.set_stats(m, v)?;
            b.set_mode(if flag == 2 { BnMode::Eval } else { BnMode::Train });
        }
    }
    if r.pos != buf.len() {
        return Err(FlowError::Format(format!("{} trailing bytes after checkpoint", buf.len() - r.pos)));
    }
    Ok(model)
}

pub fn save(model: &FlowModel, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<FlowModel> {
    from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn round_trip_is_bitwise() {
        for family in Family::ALL {
            let spec = ModelSpec::new(family, 3).layers(2).hidden(vec![5, 4]).components(2).cond_width(1).seed(11);
            let mut model = FlowModel::new(spec).unwrap();
            let mut rng = Rng::new(1);
            model.store.iter_mut().for_each(|p| {
                let mask = p.mask.clone();
                for (k, v) in p.value.data_mut().iter_mut().enumerate() {
                    if mask.as_ref().is_none_or(|m| m.data()[k] != 0.0) {
                        *v = rng.normal();
                    }
                }
            });
            let x = Tensor::matrix(10, 3, rng.normals(30)).unwrap();
            let y = Tensor::matrix(10, 1, rng.normals(10)).unwrap();
            model.finalize_batch_norm(&x, Some(&y)).unwrap();
            let bytes = to_bytes(&model);
            let back = from_bytes(&bytes).unwrap();
            assert_eq!(to_bytes(&back), bytes);
            assert_eq!(back.spec(), model.spec());
            let a = model.log_prob_batch(&x, Some(&y)).unwrap();
            let b = back.log_prob_batch(&x, Some(&y)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn rejects_corruption() {
        let model = FlowModel::new(ModelSpec::new(Family::Maf, 2).layers(1).hidden(vec![3])).unwrap();
        let bytes = to_bytes(&model);
        assert!(from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes(&bad), Err(FlowError::Format(_))));
        let mut extra = bytes;
        extra.push(0);
        assert!(from_bytes(&extra).is_err());
    }
}
