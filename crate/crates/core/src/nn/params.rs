use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Real;

/// Index of a parameter block inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with standard deviation `scale / sqrt(fan_in)`, fan-in being the row count.
    FanIn(f64),
    Normal(f64),
}

/// Named, shaped parameter blocks of one model.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    shapes: Vec<(usize, usize)>,
    data: Vec<Vec<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            shapes: Vec::new(),
            data: Vec::new(),
        }
    }

    pub fn add<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        init: Init,
        rng: &mut R,
    ) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        let n = rows * cols;
        let values: Vec<T> = match init {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::FanIn(scale) => normal_vec(n, scale / (rows.max(1) as f64).sqrt(), rng),
            Init::Normal(std) => normal_vec(n, std, rng),
        };
        self.names.push(name);
        self.shapes.push((rows, cols));
        self.data.push(values);
        ParamId(self.data.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.data.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn shape(&self, id: ParamId) -> (usize, usize) {
        self.shapes[id.0]
    }

    pub fn get(&self, id: ParamId) -> &[T] {
        &self.data[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.data[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.data.iter().map(Vec::len).sum()
    }

    /// Order-sensitive FNV-1a digest over names, shapes, and the bit patterns of all values.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for ((name, &(r, c)), values) in self.names.iter().zip(&self.shapes).zip(&self.data) {
            feed(name.as_bytes());
            feed(&(r as u64).to_le_bytes());
            feed(&(c as u64).to_le_bytes());
            for v in values {
                feed(&v.to_f64_lossy().to_bits().to_le_bytes());
            }
        }
        h
    }

    /// Parameters of a store built by the same constructor, cast to another precision.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            shapes: self.shapes.clone(),
            data: self
                .data
                .iter()
                .map(|v| {
                    v.iter()
                        .map(|x| U::from_f64_lossy(x.to_f64_lossy()))
                        .collect()
                })
                .collect(),
        }
    }
}

fn normal_vec<T: Real, R: Rng + ?Sized>(n: usize, std: f64, rng: &mut R) -> Vec<T> {
    let dist = Normal::new(0.0, std).expect("finite init scale");
    (0..n)
        .map(|_| T::from_f64_lossy(dist.sample(rng)))
        .collect()
}

/// Gradients aligned with a [`ParamStore`]; `None` where a block received no gradient.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub(crate) grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn empty(n: usize) -> Self {
        Self {
            grads: vec![None; n],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[T]> {
        self.grads[id.0].as_deref()
    }

    /// Value of a single coordinate, zero when the block was untouched.
    pub fn at(&self, id: ParamId, index: usize) -> T {
        self.grads[id.0].as_ref().map_or(T::zero(), |g| g[index])
    }

    pub fn accumulate(&mut self, other: &Gradients<T>) {
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(t) = theirs {
                match mine {
                    Some(m) => m.iter_mut().zip(t).for_each(|(a, &b)| *a += b),
                    None => *mine = Some(t.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in self.grads.iter_mut().flatten() {
            g.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|x| {
                let v = x.to_f64_lossy();
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .all(|x| x.is_finite())
    }
}
