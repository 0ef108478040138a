//! Minimum edit distance alignment between a prototype and an example.
//!
//! The alignment produces two equal-length sequences with padding where
//! one side has no token, plus the per-position edit operation. These
//! three sequences are what the inverse editor reads.

use crate::corpus::PAD;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EditOp {
    Insert,
    Delete,
    Substitute,
    Equal,
    /// Padding marker; never produced by [`align`] itself.
    Pad,
}

impl EditOp {
    pub const ALL: [EditOp; 5] = [
        EditOp::Insert,
        EditOp::Delete,
        EditOp::Substitute,
        EditOp::Equal,
        EditOp::Pad,
    ];

    pub fn index(self) -> usize {
        match self {
            EditOp::Insert => 0,
            EditOp::Delete => 1,
            EditOp::Substitute => 2,
            EditOp::Equal => 3,
            EditOp::Pad => 4,
        }
    }

    /// The same operation seen from the other sequence's side.
    pub fn mirrored(self) -> Self {
        match self {
            EditOp::Insert => EditOp::Delete,
            EditOp::Delete => EditOp::Insert,
            other => other,
        }
    }

    pub fn symbol(self) -> char {
        match self {
            EditOp::Insert => '+',
            EditOp::Delete => '-',
            EditOp::Substitute => '~',
            EditOp::Equal => '=',
            EditOp::Pad => '.',
        }
    }
}

/// Aligned prototype `t'`, aligned example `x'` and the edit operations;
/// all three have the same length. Pad positions hold [`PAD`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignedTriple {
    pub prototype: Vec<usize>,
    pub example: Vec<usize>,
    pub ops: Vec<EditOp>,
}

impl AlignedTriple {
    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn cost(&self) -> usize {
        self.ops
            .iter()
            .filter(|op| matches!(op, EditOp::Insert | EditOp::Delete | EditOp::Substitute))
            .count()
    }
}

fn distance_table(t: &[usize], x: &[usize]) -> Vec<Vec<usize>> {
    let (n, m) = (t.len(), x.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = d[i - 1][j - 1] + usize::from(t[i - 1] != x[j - 1]);
            d[i][j] = diag.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d
}

/// Unit-cost Levenshtein distance.
pub fn edit_distance(t: &[usize], x: &[usize]) -> usize {
    // Two-row version; the full table is only needed for the traceback.
    let mut prev: Vec<usize> = (0..=x.len()).collect();
    let mut cur = vec![0; x.len() + 1];
    for (i, &a) in t.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &b) in x.iter().enumerate() {
            cur[j + 1] = (prev[j] + usize::from(a != b))
                .min(prev[j + 1] + 1)
                .min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[x.len()]
}

/// Aligns prototype `t` with example `x` (markers already stripped).
///
/// Traceback preference: equal, then substitute, then delete/insert. When
/// only a deletion and an insertion are optimal, the smaller token id is
/// emitted first (nearer the end of the alignment), which keeps
/// `align(x, t)` the mirror image of `align(t, x)`.
pub fn align(t: &[usize], x: &[usize]) -> AlignedTriple {
    let d = distance_table(t, x);
    let (mut i, mut j) = (t.len(), x.len());
    let mut proto = Vec::with_capacity(i + j);
    let mut example = Vec::with_capacity(i + j);
    let mut ops = Vec::with_capacity(i + j);
    while i > 0 || j > 0 {
        let here = d[i][j];
        let diag = i > 0 && j > 0 && here == d[i - 1][j - 1] + usize::from(t[i - 1] != x[j - 1]);
        let up = i > 0 && here == d[i - 1][j] + 1;
        let left = j > 0 && here == d[i][j - 1] + 1;
        if diag {
            let op = if t[i - 1] == x[j - 1] {
                EditOp::Equal
            } else {
                EditOp::Substitute
            };
            proto.push(t[i - 1]);
            example.push(x[j - 1]);
            ops.push(op);
            i -= 1;
            j -= 1;
        } else if up && !(left && x[j - 1] < t[i - 1]) {
            proto.push(t[i - 1]);
            example.push(PAD);
            ops.push(EditOp::Delete);
            i -= 1;
        } else {
            proto.push(PAD);
            example.push(x[j - 1]);
            ops.push(EditOp::Insert);
            j -= 1;
        }
    }
    proto.reverse();
    example.reverse();
    ops.reverse();
    AlignedTriple {
        prototype: proto,
        example,
        ops,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    /// Textbook recursive definition, memoised. Independent of the table
    /// layout used above.
    fn oracle_distance(t: &[usize], x: &[usize]) -> usize {
        fn go(t: &[usize], x: &[usize], memo: &mut std::collections::HashMap<(usize, usize), usize>) -> usize {
            if t.is_empty() {
                return x.len();
            }
            if x.is_empty() {
                return t.len();
            }
            if let Some(&v) = memo.get(&(t.len(), x.len())) {
                return v;
            }
            let (a, b) = (t[t.len() - 1], x[x.len() - 1]);
            let v = (go(&t[..t.len() - 1], &x[..x.len() - 1], memo) + usize::from(a != b))
                .min(go(&t[..t.len() - 1], x, memo) + 1)
                .min(go(t, &x[..x.len() - 1], memo) + 1);
            memo.insert((t.len(), x.len()), v);
            v
        }
        go(t, x, &mut Default::default())
    }

    #[test]
    fn identical_sequences_align_equal() {
        let a = align(&[5, 6, 7], &[5, 6, 7]);
        assert_eq!(a.ops, vec![EditOp::Equal; 3]);
        assert_eq!(edit_distance(&[5, 6, 7], &[5, 6, 7]), 0);
    }

    #[test]
    fn single_insertion() {
        let a = align(&[5, 6], &[5, 9, 6]);
        assert_eq!(a.ops, vec![EditOp::Equal, EditOp::Insert, EditOp::Equal]);
        assert_eq!(a.prototype, vec![5, PAD, 6]);
        assert_eq!(a.example, vec![5, 9, 6]);
    }

    #[test]
    fn single_substitution() {
        assert_eq!(edit_distance(&[5], &[6]), 1);
        assert_eq!(align(&[5], &[6]).ops, vec![EditOp::Substitute]);
    }

    #[test]
    fn random_pairs_match_dp_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let t: Vec<usize> = (0..8).map(|_| rng.random_range(4..9)).collect();
            let x: Vec<usize> = (0..8).map(|_| rng.random_range(4..9)).collect();
            let want = oracle_distance(&t, &x);
            assert_eq!(align(&t, &x).cost(), want);
        }
        for _ in 0..500 {
            let n = rng.random_range(0..10);
            let m = rng.random_range(0..10);
            let t: Vec<usize> = (0..n).map(|_| rng.random_range(4..8)).collect();
            let x: Vec<usize> = (0..m).map(|_| rng.random_range(4..8)).collect();
            assert_eq!(edit_distance(&t, &x), oracle_distance(&t, &x));
        }
    }

    fn seq() -> impl Strategy<Value = Vec<usize>> {
        prop::collection::vec(4usize..8, 1..9)
    }

    proptest! {
        #[test]
        fn alignment_invariants(t in seq(), x in seq()) {
            let a = align(&t, &x);
            prop_assert_eq!(a.prototype.len(), a.ops.len());
            prop_assert_eq!(a.example.len(), a.ops.len());
            for k in 0..a.len() {
                let (p, e) = (a.prototype[k], a.example[k]);
                match a.ops[k] {
                    EditOp::Insert => prop_assert!(p == PAD && e != PAD),
                    EditOp::Delete => prop_assert!(p != PAD && e == PAD),
                    EditOp::Substitute => prop_assert!(p != PAD && e != PAD && p != e),
                    EditOp::Equal => prop_assert!(p == e && p != PAD),
                    EditOp::Pad => prop_assert!(false, "pad op emitted"),
                }
            }
            prop_assert_eq!(a.cost(), edit_distance(&t, &x));
            let strip = |v: &[usize]| v.iter().copied().filter(|&i| i != PAD).collect::<Vec<_>>();
            prop_assert_eq!(strip(&a.prototype), t.clone());
            prop_assert_eq!(strip(&a.example), x.clone());
        }

        #[test]
        fn alignment_is_mirror_symmetric(t in seq(), x in seq()) {
            prop_assert_eq!(edit_distance(&t, &x), edit_distance(&x, &t));
            let fwd: Vec<EditOp> = align(&t, &x).ops.iter().map(|o| o.mirrored()).collect();
            prop_assert_eq!(fwd, align(&x, &t).ops);
        }
    }
}
