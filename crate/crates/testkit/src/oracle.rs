//! Single-process reference answers.

use std::collections::HashMap;

use spillway_core::record::Record;

/// Exact word counts, sorted by word bytes.
pub fn oracle_wordcount(corpus: &[u8]) -> Vec<(String, u64)> {
    let text = std::str::from_utf8(corpus).expect("corpus is UTF-8");
    let mut counts: HashMap<&str, u64> = HashMap::new();
    for w in text.split_ascii_whitespace() {
        *counts.entry(w).or_default() += 1;
    }
    let mut out: Vec<(String, u64)> = counts.into_iter().map(|(w, c)| (w.to_string(), c)).collect();
    out.sort_unstable_by(|a, b| a.0.as_bytes().cmp(b.0.as_bytes()));
    out
}

/// Concatenates the runs and sorts by key, keeping equal keys in run order.
pub fn sort_oracle(runs: &[Vec<Record>]) -> Vec<Record> {
    let mut all: Vec<Record> = runs.iter().flatten().cloned().collect();
    all.sort_by(|a, b| a.key.cmp(&b.key));
    all
}

/// Parses `key<TAB>count<LF>` lines.
pub fn parse_counts(text: &[u8]) -> Vec<(String, u64)> {
    std::str::from_utf8(text)
        .expect("final output is UTF-8")
        .lines()
        .map(|line| {
            let (k, v) = line.split_once('\t').unwrap_or_else(|| panic!("no tab in line {line:?}"));
            (k.to_string(), v.parse().unwrap_or_else(|_| panic!("bad count in {line:?}")))
        })
        .collect()
}

/// Describes the first few differences between two count lists, or `None`
/// when they are equal as multisets.
pub fn count_diff(got: &[(String, u64)], want: &[(String, u64)]) -> Option<String> {
    let mut got = got.to_vec();
    got.sort();
    let mut want = want.to_vec();
    want.sort();
    if got == want {
        return None;
    }
    let g: HashMap<&str, u64> = got.iter().map(|(k, v)| (k.as_str(), *v)).collect();
    let w: HashMap<&str, u64> = want.iter().map(|(k, v)| (k.as_str(), *v)).collect();
    let mut diffs: Vec<String> = w
        .iter()
        .filter(|(k, v)| g.get(*k) != Some(v))
        .map(|(k, v)| format!("{k}: want {v}, got {:?}", g.get(k)))
        .chain(g.keys().filter(|k| !w.contains_key(*k)).map(|k| format!("{k}: unexpected")))
        .collect();
    diffs.sort();
    let dup_keys = got.len() - g.len();
    Some(format!(
        "{} entries vs {} expected, {dup_keys} repeated keys; {}",
        got.len(),
        want.len(),
        diffs.into_iter().take(5).collect::<Vec<_>>().join("; ")
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_examples() {
        assert_eq!(oracle_wordcount(b"a b a"), [("a".to_string(), 2), ("b".to_string(), 1)]);
        assert!(oracle_wordcount(b"").is_empty());
        assert_eq!(oracle_wordcount(b"  x\n\tx \n").len(), 1);
    }

    #[test]
    fn sort_oracle_is_stable() {
        let runs = vec![
            vec![Record::new("b", "0"), Record::new("c", "0")],
            vec![Record::new("a", "1"), Record::new("b", "1")],
        ];
        let keys: Vec<_> = sort_oracle(&runs).into_iter().map(|r| (r.key, r.value)).collect();
        assert_eq!(
            keys,
            [
                (b"a".to_vec(), b"1".to_vec()),
                (b"b".to_vec(), b"0".to_vec()),
                (b"b".to_vec(), b"1".to_vec()),
                (b"c".to_vec(), b"0".to_vec())
            ]
        );
    }

    #[test]
    fn diff_reports_mismatches() {
        let a = vec![("x".to_string(), 1), ("y".to_string(), 2)];
        let b = vec![("y".to_string(), 2), ("x".to_string(), 1)];
        assert_eq!(count_diff(&a, &b), None);
        let c = vec![("x".to_string(), 3)];
        assert!(count_diff(&a, &c).unwrap().contains("x: want 3"));
    }

    #[test]
    fn parse_round_trip() {
        assert_eq!(parse_counts(b"a\t2\nb\t1\n"), [("a".into(), 2), ("b".into(), 1)]);
    }
}
