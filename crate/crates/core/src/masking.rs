//! Degree assignment and binary masks for MADE-style conditioners.
//!
//! Masks are stored in the `[source × destination]` orientation used by
//! [`Tensor::matmul_masked`]: entry `(i, j)` is 1 iff unit `j` of the next
//! layer may read unit `i` of the previous one. Label inputs of a conditional
//! network occupy the trailing rows of the first mask and are never masked.

use std::fmt;
use std::sync::Arc;

use crate::error::{FlowError, Result};
use crate::rng::{Rng, Stream};
use crate::tensor::Tensor;

/// An autoregressive ordering, stored as the sequence of variable indices
/// (0-based) from first to last position.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Order {
    sequence: Vec<usize>,
    position: Vec<usize>,
}

impl Order {
    pub fn identity(d: usize) -> Self {
        Self::from_sequence((0..d).collect()).expect("identity is a permutation")
    }

    pub fn from_sequence(sequence: Vec<usize>) -> Result<Self> {
        let d = sequence.len();
        let mut position = vec![usize::MAX; d];
        for (pos, &var) in sequence.iter().enumerate() {
            if var >= d || position[var] != usize::MAX {
                return Err(FlowError::usage(format!("{sequence:?} is not a permutation of 0..{d}")));
            }
            position[var] = pos;
        }
        Ok(Order { sequence, position })
    }

    /// Build from 1-based variable labels, e.g. `(2, 3, 1)`.
    pub fn from_one_based(labels: &[usize]) -> Result<Self> {
        if labels.contains(&0) {
            return Err(FlowError::usage("one-based order contains 0"));
        }
        Self::from_sequence(labels.iter().map(|&l| l - 1).collect())
    }

    pub fn to_one_based(&self) -> Vec<usize> {
        self.sequence.iter().map(|v| v + 1).collect()
    }

    pub fn len(&self) -> usize {
        self.sequence.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequence.is_empty()
    }

    /// Variables from first to last position.
    pub fn sequence(&self) -> &[usize] {
        &self.sequence
    }

    /// 0-based position of variable `var`.
    pub fn position_of(&self, var: usize) -> usize {
        self.position[var]
    }

    pub fn reversed(&self) -> Self {
        reverse_order(self)
    }
}

impl fmt::Display for Order {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let labels: Vec<String> = self.to_one_based().iter().map(usize::to_string).collect();
        write!(f, "({})", labels.join(","))
    }
}

pub fn reverse_order(order: &Order) -> Order {
    let mut seq = order.sequence.clone();
    seq.reverse();
    Order::from_sequence(seq).expect("reversal keeps a permutation")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DegreeAssignment {
    Sequential,
    Random,
}

impl DegreeAssignment {
    pub fn code(self) -> u8 {
        match self {
            DegreeAssignment::Sequential => 0,
            DegreeAssignment::Random => 1,
        }
    }

    pub fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(DegreeAssignment::Sequential),
            1 => Ok(DegreeAssignment::Random),
            _ => Err(FlowError::Format(format!("unknown degree assignment code {c}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    /// Degree of each input variable (indexed by variable), `1..=D`.
    pub input_degrees: Vec<usize>,
    pub hidden_degrees: Vec<Vec<usize>>,
    /// Degree of each output variable (indexed by variable), `0..D`.
    pub output_degrees: Vec<usize>,
    /// One mask per weight matrix, input side first.
    pub masks: Vec<Arc<Tensor>>,
    pub cond_width: usize,
    pub order: Order,
}

fn connect(src: &[usize], dst: &[usize], label_rows: usize) -> Tensor {
    let rows = src.len() + label_rows;
    let mut m = Tensor::zeros(&[rows, dst.len()]);
    for (i, &ds) in src.iter().enumerate() {
        for (j, &dd) in dst.iter().enumerate() {
            if ds <= dd {
                m.set(i, j, 1.0);
            }
        }
    }
    for i in src.len()..rows {
        for j in 0..dst.len() {
            m.set(i, j, 1.0);
        }
    }
    m
}

pub fn build_masks(
    d: usize,
    hidden_sizes: &[usize],
    order: &Order,
    assignment: DegreeAssignment,
    cond_width: usize,
    seed: u64,
) -> Result<MaskSet> {
    if d == 0 {
        return Err(FlowError::usage("data dimension must be at least 1"));
    }
    if order.len() != d {
        return Err(FlowError::dim("build_masks", format!("order of length {} for D={d}", order.len())));
    }
    if hidden_sizes.contains(&0) {
        return Err(FlowError::usage("hidden layers need at least one unit"));
    }
    let max_hidden = (d - 1).max(1);
    let input_degrees: Vec<usize> = (0..d).map(|v| order.position_of(v) + 1).collect();
    let output_degrees: Vec<usize> = (0..d).map(|v| order.position_of(v)).collect();

    let mut rng = Rng::stream(seed, Stream::MaskDegrees);
    let hidden_degrees: Vec<Vec<usize>> = hidden_sizes
        .iter()
        .map(|&h| match assignment {
            DegreeAssignment::Sequential => (0..h).map(|k| k % max_hidden + 1).collect(),
            DegreeAssignment::Random => (0..h).map(|_| rng.int_inclusive(1, max_hidden)).collect(),
        })
        .collect();

    let mut masks = Vec::with_capacity(hidden_sizes.len() + 1);
    let mut prev: &[usize] = &input_degrees;
    let mut label_rows = cond_width;
    for degrees in &hidden_degrees {
        masks.push(Arc::new(connect(prev, degrees, label_rows)));
        prev = degrees;
        label_rows = 0;
    }
    masks.push(Arc::new(connect(prev, &output_degrees, label_rows)));

    Ok(MaskSet {
        input_degrees,
        hidden_degrees,
        output_degrees,
        masks,
        cond_width,
        order: order.clone(),
    })
}

impl MaskSet {
    pub fn dim(&self) -> usize {
        self.input_degrees.len()
    }

    pub fn output_mask(&self) -> &Tensor {
        self.masks.last().expect("at least one mask")
    }

    /// Output mask widened for a head whose column `k` belongs to variable
    /// `vars[k]`; every parameter block gets a full copy.
    pub fn head_mask(&self, vars: &[usize]) -> Tensor {
        self.output_mask().select_cols(vars)
    }

    /// Boolean reachability from each input variable to each output
    /// variable, `[D × D]`, label rows excluded.
    pub fn connectivity(&self) -> Tensor {
        let d = self.dim();
        let mut reach = Tensor::identity(d);
        for (k, m) in self.masks.iter().enumerate() {
            let m = if k == 0 { m.select_rows(&(0..d).collect::<Vec<_>>()) } else { (**m).clone() };
            reach = reach.matmul(&m).expect("masks chain").map(|x| if x > 0.0 { 1.0 } else { 0.0 });
        }
        reach
    }

    pub fn ones(&self) -> usize {
        self.masks.iter().map(|m| m.sum() as usize).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn three_dim_single_hidden_layer() {
        let ms = build_masks(3, &[4], &Order::identity(3), DegreeAssignment::Sequential, 0, 0).unwrap();
        assert_eq!(ms.input_degrees, vec![1, 2, 3]);
        assert_eq!(ms.hidden_degrees, vec![vec![1, 2, 1, 2]]);
        assert_eq!(ms.output_degrees, vec![0, 1, 2]);
        // input → hidden: hidden units of degree 1 read input degree 1 only.
        let m0 = &ms.masks[0];
        assert_eq!(m0.shape(), &[3, 4]);
        #[rustfmt::skip]
        let expect0 = [
            1.0, 1.0, 1.0, 1.0,
            0.0, 1.0, 0.0, 1.0,
            0.0, 0.0, 0.0, 0.0,
        ];
        assert_eq!(m0.data(), &expect0);
        // hidden → output: output of degree 0 reads nothing.
        let m1 = &ms.masks[1];
        #[rustfmt::skip]
        let expect1 = [
            0.0, 1.0, 1.0,
            0.0, 0.0, 1.0,
            0.0, 1.0, 1.0,
            0.0, 0.0, 1.0,
        ];
        assert_eq!(m1.data(), &expect1);
        assert_eq!(ms.ones(), 6 + 6);
    }

    #[test]
    fn single_dimension_has_no_output_connections() {
        let ms = build_masks(1, &[5], &Order::identity(1), DegreeAssignment::Sequential, 0, 0).unwrap();
        assert_eq!(ms.output_degrees, vec![0]);
        assert_eq!(ms.hidden_degrees[0], vec![1; 5]);
        assert_eq!(ms.output_mask().sum(), 0.0);
    }

    #[test]
    fn label_rows_are_all_ones() {
        let ms = build_masks(3, &[4, 4], &Order::identity(3), DegreeAssignment::Sequential, 10, 0).unwrap();
        let m0 = &ms.masks[0];
        assert_eq!(m0.shape(), &[13, 4]);
        for r in 3..13 {
            assert!(m0.row_slice(r).iter().all(|&x| x == 1.0));
        }
        assert_eq!(ms.masks[1].shape(), &[4, 4]);
    }

    #[test]
    fn reversal_examples() {
        let o = Order::from_one_based(&[1, 2, 3]).unwrap();
        assert_eq!(reverse_order(&o).to_one_based(), vec![3, 2, 1]);
        let o = Order::from_one_based(&[2, 3, 1]).unwrap();
        assert_eq!(reverse_order(&o).to_one_based(), vec![1, 3, 2]);
        assert_eq!(reverse_order(&reverse_order(&o)), o);
    }

    #[test]
    fn rejects_non_permutations() {
        assert!(Order::from_sequence(vec![0, 0, 1]).is_err());
        assert!(Order::from_sequence(vec![0, 3, 1]).is_err());
        assert!(Order::from_one_based(&[0, 1]).is_err());
    }

    #[test]
    fn random_assignment_is_reproducible() {
        let o = Order::identity(6);
        let a = build_masks(6, &[3, 3], &o, DegreeAssignment::Random, 0, 17).unwrap();
        let b = build_masks(6, &[3, 3], &o, DegreeAssignment::Random, 0, 17).unwrap();
        assert_eq!(a, b);
        assert!(a.hidden_degrees.iter().flatten().all(|&k| (1..=5).contains(&k)));
    }

    fn order_strategy() -> impl Strategy<Value = Order> {
        (1usize..9)
            .prop_flat_map(|d| Just((0..d).collect::<Vec<_>>()).prop_shuffle())
            .prop_map(|seq| Order::from_sequence(seq).unwrap())
    }

    proptest! {
        #[test]
        fn composite_connectivity_is_strictly_lower_triangular(
            order in order_strategy(),
            hidden in prop::collection::vec(1usize..12, 0..3),
            random in any::<bool>(),
            seed in any::<u64>(),
        ) {
            let d = order.len();
            let assign = if random { DegreeAssignment::Random } else { DegreeAssignment::Sequential };
            let ms = build_masks(d, &hidden, &order, assign, 0, seed).unwrap();
            let reach = ms.connectivity();
            for src in 0..d {
                for dst in 0..d {
                    if reach.get(src, dst) > 0.0 {
                        prop_assert!(order.position_of(src) < order.position_of(dst));
                    }
                }
            }
        }

        #[test]
        fn wide_layers_contain_every_degree(order in order_strategy(), extra in 0usize..5) {
            let d = order.len();
            let h = d.saturating_sub(1).max(1) + extra;
            let ms = build_masks(d, &[h, h], &order, DegreeAssignment::Sequential, 0, 0).unwrap();
            for layer in &ms.hidden_degrees {
                for k in 1..=d.saturating_sub(1).max(1) {
                    prop_assert!(layer.contains(&k));
                }
            }
            // With every degree present the connectivity is the full strict
            // lower triangle: no conditional independences are introduced.
            let reach = ms.connectivity();
            for src in 0..d {
                for dst in 0..d {
                    let expect = order.position_of(src) < order.position_of(dst);
                    prop_assert_eq!(reach.get(src, dst) > 0.0, expect);
                }
            }
        }

        #[test]
        fn reverse_is_an_involution(order in order_strategy()) {
            prop_assert_eq!(reverse_order(&reverse_order(&order)), order);
        }
    }
}
