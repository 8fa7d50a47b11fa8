//! Iteration plan for broadcasting a smaller operand into a full shape.
//!
//! Both shapes have equal rank and every dimension of the small operand is
//! either equal to the full one or 1. Adjacent dimensions of the same kind
//! are coalesced so the innermost loop runs over the longest contiguous run.

#[derive(Debug, Clone)]
pub(crate) struct BroadcastPlan {
    dims: Vec<usize>,
    small_strides: Vec<usize>,
}

impl BroadcastPlan {
    pub(crate) fn new(full: &[usize], small: &[usize]) -> Option<Self> {
        if full.len() != small.len() {
            return None;
        }
        // (size, is_broadcast)
        let mut runs: Vec<(usize, bool)> = Vec::new();
        for (&f, &s) in full.iter().zip(small) {
            if s != f && s != 1 {
                return None;
            }
            if f == 1 {
                continue;
            }
            let bcast = s == 1;
            match runs.last_mut() {
                Some((size, kind)) if *kind == bcast => *size *= f,
                _ => runs.push((f, bcast)),
            }
        }
        if runs.is_empty() {
            runs.push((1, false));
        }
        let mut small_strides = vec![0; runs.len()];
        let mut acc = 1;
        for (i, &(size, bcast)) in runs.iter().enumerate().rev() {
            if !bcast {
                small_strides[i] = acc;
                acc *= size;
            }
        }
        Some(BroadcastPlan {
            dims: runs.iter().map(|r| r.0).collect(),
            small_strides,
        })
    }

    /// Calls `f(full_offset, small_offset, len, small_step)` for each
    /// innermost run, in row-major order of the full shape.
    pub(crate) fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let rank = self.dims.len();
        let inner = self.dims[rank - 1];
        let step = self.small_strides[rank - 1];
        let outer = &self.dims[..rank - 1];
        let outer_count: usize = outer.iter().product();
        let mut idx = vec![0usize; outer.len()];
        let mut small_off = 0usize;
        for run in 0..outer_count {
            f(run * inner, small_off, inner, step);
            for d in (0..outer.len()).rev() {
                idx[d] += 1;
                small_off += self.small_strides[d];
                if idx[d] < outer[d] {
                    break;
                }
                small_off -= self.small_strides[d] * outer[d];
                idx[d] = 0;
            }
        }
    }
}
