//! Exhaustive reference implementations for the text metrics.

pub const ALPHABET: [&str; 3] = ["a", "b", "c"];

/// Every string over [`ALPHABET`] of length `0..=max_len`.
pub fn all_strings(max_len: usize) -> Vec<Vec<String>> {
    let mut out = vec![vec![]];
    let mut frontier = vec![vec![]];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for sym in ALPHABET {
                let mut t: Vec<String> = s.clone();
                t.push(sym.to_string());
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

fn is_subsequence(needle: &[&String], hay: &[String]) -> bool {
    let mut it = hay.iter();
    needle.iter().all(|n| it.any(|h| h == *n))
}

/// Longest subsequence of `a` (enumerated over all index subsets) that is
/// also a subsequence of `b`.
pub fn lcs_brute(a: &[String], b: &[String]) -> usize {
    let mut best = 0;
    for mask in 0u32..(1 << a.len()) {
        let picked: Vec<&String> = (0..a.len()).filter(|i| mask >> i & 1 == 1).map(|i| &a[i]).collect();
        if picked.len() > best && is_subsequence(&picked, b) {
            best = picked.len();
        }
    }
    best
}

/// Minimal edit-script length found by unmemoized recursion over all scripts.
pub fn edit_brute(r: &[String], h: &[String]) -> usize {
    match (r.split_first(), h.split_first()) {
        (None, _) => h.len(),
        (_, None) => r.len(),
        (Some((x, rr)), Some((y, hr))) => {
            let sub = edit_brute(rr, hr) + usize::from(x != y);
            let del = edit_brute(rr, h) + 1;
            let ins = edit_brute(r, hr) + 1;
            sub.min(del).min(ins)
        }
    }
}
