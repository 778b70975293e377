use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// A contiguous range of a flat parameter (or gradient) vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub offset: usize,
    pub len: usize,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

impl Slot {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }

    pub fn of<'a>(&self, p: &'a [f32]) -> &'a [f32] {
        &p[self.range()]
    }

    pub fn of_mut<'a>(&self, p: &'a mut [f32]) -> &'a mut [f32] {
        &mut p[self.range()]
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `[-b, b]`.
    Uniform(f32),
    Normal(f32),
    /// Xavier/Glorot uniform for a `fan_in x fan_out` matrix.
    Xavier(usize, usize),
    /// He normal for ReLU layers.
    He(usize),
}

/// Allocates parameter slots in order and initializes them.
pub struct ParamBuilder {
    values: Vec<f32>,
    slots: Vec<Slot>,
    rng: ChaCha8Rng,
}

impl ParamBuilder {
    pub fn new(rng: ChaCha8Rng) -> Self {
        Self {
            values: Vec::new(),
            slots: Vec::new(),
            rng,
        }
    }

    pub fn alloc(&mut self, len: usize, init: Init, decay: bool) -> Slot {
        let offset = self.values.len();
        let rng = &mut self.rng;
        let draw: Box<dyn FnMut(&mut ChaCha8Rng) -> f32> = match init {
            Init::Zeros => Box::new(|_| 0.0),
            Init::Ones => Box::new(|_| 1.0),
            Init::Uniform(b) => Box::new(move |r| r.gen_range(-b..=b)),
            Init::Normal(s) => {
                let n = Normal::new(0.0, s).expect("finite std");
                Box::new(move |r| n.sample(r))
            }
            Init::Xavier(fi, fo) => {
                let b = (6.0 / (fi + fo) as f32).sqrt();
                Box::new(move |r| r.gen_range(-b..=b))
            }
            Init::He(fi) => {
                let n = Normal::new(0.0, (2.0 / fi as f32).sqrt()).expect("finite std");
                Box::new(move |r| n.sample(r))
            }
        };
        let mut draw = draw;
        self.values.extend((0..len).map(|_| draw(rng)));
        let slot = Slot { offset, len, decay };
        self.slots.push(slot);
        slot
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn finish(self) -> Vec<f32> {
        self.values
    }
}
