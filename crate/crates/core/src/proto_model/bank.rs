use ndarray::{Array2, Array3, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Per-class concept basis vectors, `[C, M, D]`.
///
/// Basis vector `j` of class `c` has flat index `c * M + j`; that is also the
/// channel order of similarity maps and the column order of the classifier head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisBank {
    pub vectors: Array3<f64>,
    pub class_labels: Vec<String>,
}

impl BasisBank {
    pub fn new(vectors: Array3<f64>, class_labels: Vec<String>) -> Result<Self> {
        let (c, m, d) = vectors.dim();
        ensure(c >= 1 && m >= 1 && d >= 1, || format!("empty basis bank {c}x{m}x{d}"))?;
        if class_labels.len() != c {
            return Err(Error::Dimension(format!(
                "{} class labels for {c} classes",
                class_labels.len()
            )));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("basis bank".into()));
        }
        let bank = Self { vectors, class_labels };
        for k in 0..bank.total() {
            if bank.flat(k).iter().all(|&v| v == 0.0) {
                return Err(Error::Validation(format!("basis vector {k} is the zero vector")));
            }
        }
        Ok(bank)
    }

    /// Entries drawn uniformly from `[0, 1)`.
    pub fn init_uniform<R: Rng + ?Sized>(
        class_labels: Vec<String>,
        per_class: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let c = class_labels.len();
        let vectors = Array3::from_shape_fn((c, per_class, dim), |_| rng.random::<f64>());
        Self { vectors, class_labels }
    }

    pub fn num_classes(&self) -> usize {
        self.vectors.dim().0
    }

    pub fn per_class(&self) -> usize {
        self.vectors.dim().1
    }

    pub fn dim(&self) -> usize {
        self.vectors.dim().2
    }

    pub fn total(&self) -> usize {
        self.num_classes() * self.per_class()
    }

    pub fn class_of(&self, flat: usize) -> usize {
        flat / self.per_class()
    }

    pub fn flat(&self, k: usize) -> ArrayView1<'_, f64> {
        let m = self.per_class();
        self.vectors
            .index_axis(Axis(0), k / m)
            .index_axis_move(Axis(0), k % m)
    }

    pub fn class_matrix(&self, c: usize) -> ArrayView2<'_, f64> {
        self.vectors.index_axis(Axis(0), c)
    }

    /// All vectors as a `[C*M, D]` matrix.
    pub fn flat_matrix(&self) -> Array2<f64> {
        let (c, m, d) = self.vectors.dim();
        self.vectors
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((c * m, d))
            .expect("contiguous bank")
    }

    /// Rounds every entry through `f32`, matching what `basis_bank.bin` stores.
    pub fn quantize_f32(&mut self) {
        self.vectors.mapv_inplace(|v| v as f32 as f64);
    }
}
