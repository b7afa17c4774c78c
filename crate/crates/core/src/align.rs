//! Levenshtein alignment shared by the corpus labeler (token error rate) and WER.

/// Edit operations of one minimum-cost alignment of `hyp` against `reference`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EditCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
}

impl EditCounts {
    pub fn distance(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }
}

impl std::ops::AddAssign for EditCounts {
    fn add_assign(&mut self, o: Self) {
        self.substitutions += o.substitutions;
        self.deletions += o.deletions;
        self.insertions += o.insertions;
    }
}

/// Unit-cost edit distance with an S/D/I breakdown. Ties in the backtrace prefer
/// substitution/match, then deletion, then insertion.
pub fn align<T: PartialEq>(reference: &[T], hyp: &[T]) -> EditCounts {
    let (n, m) = (reference.len(), hyp.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            let del = d[(i - 1) * w + j] + 1;
            let ins = d[i * w + j - 1] + 1;
            d[i * w + j] = sub.min(del).min(ins);
        }
    }
    let mut counts = EditCounts::default();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let cur = d[i * w + j];
        if i > 0 && j > 0 {
            let diff = usize::from(reference[i - 1] != hyp[j - 1]);
            if cur == d[(i - 1) * w + j - 1] + diff {
                counts.substitutions += diff;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && cur == d[(i - 1) * w + j] + 1 {
            counts.deletions += 1;
            i -= 1;
        } else {
            counts.insertions += 1;
            j -= 1;
        }
    }
    debug_assert_eq!(counts.distance(), d[n * w + m]);
    counts
}

pub fn edit_distance<T: PartialEq>(reference: &[T], hyp: &[T]) -> usize {
    align(reference, hyp).distance()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn breakdown_of_simple_cases() {
        let r = ["a", "b", "c"];
        assert_eq!(align(&r, &["a", "x", "c", "d"]), EditCounts { substitutions: 1, deletions: 0, insertions: 1 });
        assert_eq!(align(&r, &[]), EditCounts { substitutions: 0, deletions: 3, insertions: 0 });
        assert_eq!(align::<&str>(&[], &["q"]), EditCounts { substitutions: 0, deletions: 0, insertions: 1 });
        assert_eq!(edit_distance(&r, &r), 0);
    }
}
