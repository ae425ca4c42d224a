//! Named parameter storage, graph binding and the checkpoint format.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::ops::{Deref, DerefMut};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::optim::AdamState;
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 9] = b"FUMCKPT1\n";

/// Ordered map from hierarchical parameter names to tensors. Iteration is
/// lexicographic, which fixes checkpoint layout and update order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
    rng_seed: u64,
}

impl ParamStore {
    pub fn new(rng_seed: u64) -> Self {
        ParamStore {
            entries: BTreeMap::new(),
            rng_seed,
        }
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::DuplicateParam(name.to_string()));
        }
        self.entries.insert(name.to_string(), tensor.with_grad());
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }

    pub fn total_params(&self) -> usize {
        self.entries.values().map(|t| t.numel()).sum()
    }

    /// Gives every entry a zero-filled gradient buffer.
    pub fn zero_grads(&mut self) {
        for t in self.entries.values_mut() {
            t.zero_grad();
        }
    }

    pub fn accumulate_grads(&mut self, grads: BTreeMap<String, Vec<Real>>) -> Result<()> {
        for (name, g) in grads {
            self.get_mut(&name)?.accumulate_grad(&g)?;
        }
        Ok(())
    }
}

/// Uniform(-r, r) with r = sqrt(6 / (fan_in + fan_out)).
pub fn glorot_matrix<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let r = (6.0 / (rows + cols) as f64).sqrt();
    let values: Vec<Real> = (0..rows * cols)
        .map(|_| rng.gen_range(-r..r) as Real)
        .collect();
    Tensor::matrix(rows, cols, values).unwrap()
}

pub fn zeros_vector(n: usize) -> Tensor {
    Tensor::zeros(vec![n])
}

/// A tape bound to a parameter store. Parameters are copied onto the tape
/// as leaves on first use; after `backward`, their gradients flow back by
/// name via [`Graph::into_grads`].
pub struct Graph<'a> {
    tape: Tape,
    store: &'a ParamStore,
    bound: BTreeMap<String, Var>,
    trainable: bool,
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Graph {
            tape: Tape::new(),
            store,
            bound: BTreeMap::new(),
            trainable: true,
        }
    }

    /// Binds parameters without gradient tracking; forward passes over a
    /// frozen graph skip all backward bookkeeping.
    pub fn frozen(store: &'a ParamStore) -> Self {
        Graph {
            tape: Tape::new(),
            store,
            bound: BTreeMap::new(),
            trainable: false,
        }
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.store.get(name)?;
        let requires = self.trainable && t.requires_grad();
        let v = self
            .tape
            .leaf(t.values().to_vec(), t.shape().to_vec(), requires)?;
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn scalar_value(&self, v: Var) -> Real {
        self.tape.values(v)[0]
    }

    /// Consumes the graph, handing back each bound parameter's gradient.
    /// Parameters the loss never reached are absent from the map.
    pub fn into_grads(mut self) -> BTreeMap<String, Vec<Real>> {
        let mut out = BTreeMap::new();
        for (name, var) in std::mem::take(&mut self.bound) {
            if let Some(g) = self.tape.take_grad(var) {
                out.insert(name, g);
            }
        }
        out
    }
}

impl Deref for Graph<'_> {
    type Target = Tape;
    fn deref(&self) -> &Tape {
        &self.tape
    }
}

impl DerefMut for Graph<'_> {
    fn deref_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }
}

/// Runs one forward+backward pass: builds the loss with `build`, then
/// accumulates d(loss)/d(param) into every parameter's gradient buffer.
/// Parameters the loss does not reach keep a zero gradient. Returns the
/// loss value.
pub fn backward_pass<F>(store: &mut ParamStore, build: F) -> Result<Real>
where
    F: FnOnce(&mut Graph) -> Result<Var>,
{
    for t in store.entries.values_mut() {
        t.ensure_grad();
    }
    let mut graph = Graph::new(store);
    let loss = build(&mut graph)?;
    graph.backward(loss)?;
    let value = graph.scalar_value(loss);
    let grads = graph.into_grads();
    store.accumulate_grads(grads)?;
    Ok(value)
}

/// Forward-only evaluation of a scalar-producing graph.
pub fn forward_value<F>(store: &ParamStore, build: F) -> Result<Real>
where
    F: FnOnce(&mut Graph) -> Result<Var>,
{
    let mut graph = Graph::frozen(store);
    let loss = build(&mut graph)?;
    if graph.values(loss).len() != 1 {
        return Err(Error::NonScalarLoss(graph.shape(loss).to_vec()));
    }
    Ok(graph.scalar_value(loss))
}

/// Compares analytic gradients against central finite differences on up to
/// `coords_per_param` sampled coordinates of every parameter. Returns the
/// maximum relative error |analytic - central| / (|analytic| + |central| + 1e-12).
/// `build` must be deterministic in the parameter values.
pub fn finite_difference_check<F>(
    store: &mut ParamStore,
    eps: Real,
    coords_per_param: usize,
    seed: u64,
    build: F,
) -> Result<Real>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    use rand::SeedableRng;
    store.zero_grads();
    backward_pass(store, &build)?;
    let analytic: BTreeMap<String, Vec<Real>> = store
        .iter()
        .map(|(name, t)| (name.to_string(), t.grad().unwrap().to_vec()))
        .collect();

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = store.names().map(String::from).collect();
    let mut worst: Real = 0.0;
    for name in &names {
        let n = store.get(name)?.numel();
        let picks = coords_per_param.min(n);
        let coords = rand::seq::index::sample(&mut rng, n, picks);
        for coord in coords {
            let original = store.get(name)?.values()[coord];
            store.get_mut(name)?.values_mut()[coord] = original + eps;
            let plus = forward_value(store, &build)?;
            store.get_mut(name)?.values_mut()[coord] = original - eps;
            let minus = forward_value(store, &build)?;
            store.get_mut(name)?.values_mut()[coord] = original;
            let central = (plus - minus) / (2.0 * eps);
            let a = analytic[name][coord];
            let rel = (a - central).abs() / (a.abs() + central.abs() + 1e-12);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

// --- checkpoint i/o -------------------------------------------------------
//
// magic "FUMCKPT1\n", u64 rng seed, u64 parameter count, then per parameter
// in lexicographic order: u32 name length + UTF-8 name, u32 rank, u64
// extents, f64 little-endian values. A trailing flag byte marks an optional
// Adam state (step, lr, beta1, beta2, epsilon, then first/second moment
// arrays per parameter in the same order).

struct CountingReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> CountingReader<R> {
    fn new(inner: R) -> Self {
        CountingReader { inner, offset: 0 }
    }

    fn read_exact_at(&mut self, buf: &mut [u8], path: &Path, what: &str) -> Result<()> {
        let at = self.offset;
        self.inner.read_exact(buf).map_err(|_| Error::BinaryFormat {
            path: path.display().to_string(),
            offset: at,
            what: format!("truncated while reading {what}"),
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn read_u8(&mut self, path: &Path, what: &str) -> Result<u8> {
        let mut b = [0u8; 1];
        self.read_exact_at(&mut b, path, what)?;
        Ok(b[0])
    }

    fn read_u32(&mut self, path: &Path, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact_at(&mut b, path, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn read_u64(&mut self, path: &Path, what: &str) -> Result<u64> {
        let mut b = [0u8; 8];
        self.read_exact_at(&mut b, path, what)?;
        Ok(u64::from_le_bytes(b))
    }

    fn read_f64(&mut self, path: &Path, what: &str) -> Result<f64> {
        let mut b = [0u8; 8];
        self.read_exact_at(&mut b, path, what)?;
        Ok(f64::from_le_bytes(b))
    }

    fn read_f64_array(&mut self, n: usize, path: &Path, what: &str) -> Result<Vec<Real>> {
        let mut out = Vec::with_capacity(n);
        let mut buf = vec![0u8; n * 8];
        self.read_exact_at(&mut buf, path, what)?;
        for chunk in buf.chunks_exact(8) {
            out.push(f64::from_le_bytes(chunk.try_into().unwrap()) as Real);
        }
        Ok(out)
    }
}

fn write_f64_array<W: Write>(w: &mut W, values: &[Real]) -> std::io::Result<()> {
    for v in values {
        w.write_all(&(*v as f64).to_le_bytes())?;
    }
    Ok(())
}

pub fn save_checkpoint(store: &ParamStore, adam: Option<&AdamState>, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::file(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&store.rng_seed.to_le_bytes())?;
    w.write_all(&(store.len() as u64).to_le_bytes())?;
    for (name, t) in store.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &e in t.shape() {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        write_f64_array(&mut w, t.values())?;
    }
    match adam {
        None => w.write_all(&[0u8])?,
        Some(state) => {
            w.write_all(&[1u8])?;
            w.write_all(&state.step().to_le_bytes())?;
            for v in [
                state.learning_rate(),
                state.beta1(),
                state.beta2(),
                state.epsilon(),
            ] {
                w.write_all(&(v as f64).to_le_bytes())?;
            }
            for (name, _) in store.iter() {
                let (m, v) = state.moments(name).ok_or_else(|| Error::MissingGradient(name.to_string()))?;
                write_f64_array(&mut w, m)?;
                write_f64_array(&mut w, v)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, Option<AdamState>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::file(path, e))?;
    let mut r = CountingReader::new(BufReader::new(file));

    let mut magic = [0u8; 9];
    r.read_exact_at(&mut magic, path, "magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::BinaryFormat {
            path: path.display().to_string(),
            offset: 0,
            what: "bad magic, not a FUMCKPT1 checkpoint".into(),
        });
    }
    let seed = r.read_u64(path, "rng seed")?;
    let count = r.read_u64(path, "parameter count")? as usize;
    let mut store = ParamStore::new(seed);
    let mut order = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.read_u32(path, "name length")? as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact_at(&mut name_buf, path, "name")?;
        let name = String::from_utf8(name_buf).map_err(|_| Error::BinaryFormat {
            path: path.display().to_string(),
            offset: r.offset,
            what: "parameter name is not UTF-8".into(),
        })?;
        let rank = r.read_u32(path, "rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.read_u64(path, "extent")? as usize);
        }
        let n: usize = shape.iter().product();
        let values = r.read_f64_array(n, path, "values")?;
        let tensor = Tensor::new(shape, values).map_err(|e| Error::BinaryFormat {
            path: path.display().to_string(),
            offset: r.offset,
            what: e.to_string(),
        })?;
        store.insert(&name, tensor)?;
        order.push(name);
    }
    let flag = r.read_u8(path, "adam flag")?;
    let adam = match flag {
        0 => None,
        1 => {
            let step = r.read_u64(path, "adam step")?;
            let lr = r.read_f64(path, "learning rate")? as Real;
            let beta1 = r.read_f64(path, "beta1")? as Real;
            let beta2 = r.read_f64(path, "beta2")? as Real;
            let eps = r.read_f64(path, "epsilon")? as Real;
            let mut state = AdamState::with_hyperparams(&store, lr, beta1, beta2, eps);
            state.set_step(step);
            for name in &order {
                let n = store.get(name)?.numel();
                let m = r.read_f64_array(n, path, "first moment")?;
                let v = r.read_f64_array(n, path, "second moment")?;
                state.set_moments(name, m, v)?;
            }
            Some(state)
        }
        other => {
            return Err(Error::BinaryFormat {
                path: path.display().to_string(),
                offset: r.offset - 1,
                what: format!("bad adam flag byte {other}"),
            })
        }
    };
    Ok((store, adam))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn store_rejects_duplicates_and_orders_names() {
        let mut s = ParamStore::new(7);
        s.insert("b.w", Tensor::zeros(vec![2])).unwrap();
        s.insert("a.w", Tensor::zeros(vec![2])).unwrap();
        assert!(matches!(
            s.insert("a.w", Tensor::zeros(vec![2])),
            Err(Error::DuplicateParam(_))
        ));
        let names: Vec<&str> = s.names().collect();
        assert_eq!(names, vec!["a.w", "b.w"]);
        assert!(s.iter().all(|(_, t)| t.requires_grad()));
    }

    #[test]
    fn backward_pass_zeroes_unreached_params() {
        let mut s = ParamStore::new(0);
        s.insert("used", Tensor::vector(vec![1.0, 2.0])).unwrap();
        s.insert("unused", Tensor::vector(vec![3.0])).unwrap();
        let loss = backward_pass(&mut s, |g| {
            let x = g.param("used")?;
            let sq = g.mul(x, x)?;
            Ok(g.sum_all(sq))
        })
        .unwrap();
        assert_eq!(loss, 5.0);
        assert_eq!(s.get("used").unwrap().grad().unwrap(), &[2.0, 4.0]);
        assert_eq!(s.get("unused").unwrap().grad().unwrap(), &[0.0]);
    }

    #[test]
    fn constant_loss_leaves_all_grads_zero() {
        let mut s = ParamStore::new(0);
        s.insert("p", Tensor::vector(vec![1.0, 2.0])).unwrap();
        backward_pass(&mut s, |g| g.constant(vec![4.0], vec![1])).unwrap();
        assert_eq!(s.get("p").unwrap().grad().unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn finite_difference_on_quadratic_is_machine_precision() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut s = ParamStore::new(5);
        s.insert("w", glorot_matrix(3, 3, &mut rng)).unwrap();
        let err = finite_difference_check(&mut s, 1e-4, 9, 11, |g| {
            let w = g.param("w")?;
            let sq = g.mul(w, w)?;
            Ok(g.sum_all(sq))
        })
        .unwrap();
        assert!(err < 1e-8, "quadratic fd error {err}");
    }

    #[test]
    fn checkpoint_roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::new(99);
        s.insert("layer.w", glorot_matrix(4, 3, &mut rng)).unwrap();
        s.insert("layer.b", Tensor::vector(vec![0.5, -0.25, 0.125]))
            .unwrap();
        save_checkpoint(&s, None, &path).unwrap();
        let (loaded, adam) = load_checkpoint(&path).unwrap();
        assert!(adam.is_none());
        assert_eq!(loaded.rng_seed(), 99);
        for (name, t) in s.iter() {
            assert_eq!(loaded.get(name).unwrap().values(), t.values());
            assert_eq!(loaded.get(name).unwrap().shape(), t.shape());
        }
        let path2 = dir.path().join("model2.ckpt");
        save_checkpoint(&loaded, None, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn checkpoint_rejects_empty_and_corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.ckpt");
        std::fs::write(&path, b"").unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("byte 0"), "{err}");

        std::fs::write(&path, b"NOTFUMCK1").unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("magic"), "{err}");

        // Valid magic, then truncated: the error names the offset.
        let mut bytes = CHECKPOINT_MAGIC.to_vec();
        bytes.extend_from_slice(&42u64.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("byte 17"), "{err}");
    }
}
