//! Final-answer extraction and majority voting.

use std::collections::HashMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

/// How a dataset's answers are written.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    /// Integer answers in `0..=999`.
    IntegerAime,
    /// Multiple choice `A`-`D`.
    ChoiceGpqa,
}

impl DatasetKind {
    /// Guesses the answer format from a dataset name.
    pub fn infer(dataset: &str) -> Self {
        let d = dataset.to_ascii_lowercase();
        if d.contains("gpqa") || d.contains("choice") || d.contains("mmlu") {
            DatasetKind::ChoiceGpqa
        } else {
            DatasetKind::IntegerAime
        }
    }
}

fn integer_patterns() -> &'static [Regex; 2] {
    static RE: OnceLock<[Regex; 2]> = OnceLock::new();
    RE.get_or_init(|| {
        [
            Regex::new(r"\\boxed\{\s*(\d+)\s*\}").unwrap(),
            Regex::new(r"(?i)answer(?:\s+is|\s*:)\s*[:=]?\s*\**\s*\$?(\d+)").unwrap(),
        ]
    })
}

fn choice_patterns() -> &'static [Regex; 3] {
    static RE: OnceLock<[Regex; 3]> = OnceLock::new();
    RE.get_or_init(|| {
        [
            Regex::new(r"\\boxed\{\s*\(?([A-D])\)?\s*\}").unwrap(),
            Regex::new(r"(?i)answer(?:\s+is|\s*:)\s*[:=]?\s*\**\s*\(?([A-D])\b").unwrap(),
            Regex::new(r"\b([A-D])\b").unwrap(),
        ]
    })
}

/// Last match start and capture across `patterns`.
fn last_capture<'t>(patterns: &[Regex], text: &'t str, accept: impl Fn(&str) -> bool) -> Option<&'t str> {
    patterns
        .iter()
        .flat_map(|re| re.captures_iter(text))
        .filter_map(|c| c.get(1))
        .filter(|m| accept(m.as_str()))
        .max_by_key(|m| m.start())
        .map(|m| m.as_str())
}

/// Pulls the final answer out of a completion.
///
/// Integer answers come from the last `\boxed{n}` or "answer is n" /
/// "Answer: n" with `n` in `0..=999`, normalized without leading zeros.
/// Choice answers come from the last explicit boxed or "answer" letter,
/// falling back to the last standalone `A`-`D`.
pub fn extract_answer(text: &str, kind: DatasetKind) -> Option<String> {
    match kind {
        DatasetKind::IntegerAime => last_capture(integer_patterns(), text, |s| {
            s.parse::<u64>().is_ok_and(|n| n <= 999)
        })
        .map(|s| s.parse::<u64>().unwrap().to_string()),
        DatasetKind::ChoiceGpqa => {
            let [boxed, answer, bare] = choice_patterns();
            last_capture(&[boxed.clone(), answer.clone()], text, |_| true)
                .or_else(|| last_capture(std::slice::from_ref(bare), text, |_| true))
                .map(str::to_string)
        }
    }
}

/// Compares an extracted answer with a gold answer under the dataset's format.
pub fn answers_match(extracted: &str, gold: &str, kind: DatasetKind) -> bool {
    match kind {
        DatasetKind::IntegerAime => match (extracted.trim().parse::<u64>(), gold.trim().parse::<u64>()) {
            (Ok(a), Ok(b)) => a == b,
            _ => extracted.trim() == gold.trim(),
        },
        DatasetKind::ChoiceGpqa => extracted.trim().eq_ignore_ascii_case(gold.trim()),
    }
}

/// Majority vote over `(answer, mean entropy)` samples.
///
/// Samples without an answer do not vote. Ties go to the answer whose
/// supporting samples have the lowest mean entropy.
pub fn majority_vote(samples: &[(Option<String>, f64)]) -> Option<String> {
    let mut tally: HashMap<&str, (usize, f64)> = HashMap::new();
    for (answer, h) in samples {
        if let Some(a) = answer {
            let e = tally.entry(a.as_str()).or_insert((0, 0.0));
            e.0 += 1;
            e.1 += h;
        }
    }
    tally
        .into_iter()
        .map(|(a, (n, sum))| (a, n, sum / n as f64))
        .max_by(|x, y| {
            x.1.cmp(&y.1)
                .then(y.2.total_cmp(&x.2))
                .then(y.0.cmp(x.0))
        })
        .map(|(a, _, _)| a.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integer_answers() {
        assert_eq!(extract_answer("… the answer is 042.", DatasetKind::IntegerAime).as_deref(), Some("42"));
        assert_eq!(extract_answer("so \\boxed{17} and done", DatasetKind::IntegerAime).as_deref(), Some("17"));
        assert_eq!(
            extract_answer("Answer: 5. Wait, recheck. \\boxed{7}", DatasetKind::IntegerAime).as_deref(),
            Some("7")
        );
        assert_eq!(
            extract_answer("\\boxed{7} ... Final Answer: **12**", DatasetKind::IntegerAime).as_deref(),
            Some("12")
        );
        assert_eq!(extract_answer("the answer is 1234", DatasetKind::IntegerAime), None);
        assert_eq!(extract_answer("no conclusion here", DatasetKind::IntegerAime), None);
    }

    #[test]
    fn choice_answers() {
        assert_eq!(extract_answer("Final answer: (C)", DatasetKind::ChoiceGpqa).as_deref(), Some("C"));
        assert_eq!(extract_answer("The answer is B.", DatasetKind::ChoiceGpqa).as_deref(), Some("B"));
        assert_eq!(extract_answer("Options A and D remain; D", DatasetKind::ChoiceGpqa).as_deref(), Some("D"));
        assert_eq!(
            extract_answer("answer: A. A is correct because of D-branes", DatasetKind::ChoiceGpqa).as_deref(),
            Some("A")
        );
        assert_eq!(extract_answer("nothing to see", DatasetKind::ChoiceGpqa), None);
    }

    #[test]
    fn matching() {
        assert!(answers_match("42", "042", DatasetKind::IntegerAime));
        assert!(answers_match("c", "C", DatasetKind::ChoiceGpqa));
        assert!(!answers_match("41", "42", DatasetKind::IntegerAime));
    }

    #[test]
    fn kind_inference() {
        assert_eq!(DatasetKind::infer("GPQA-Diamond"), DatasetKind::ChoiceGpqa);
        assert_eq!(DatasetKind::infer("aime24"), DatasetKind::IntegerAime);
    }

    #[test]
    fn voting() {
        let s = |a: &str, h| (Some(a.to_string()), h);
        assert_eq!(majority_vote(&[s("7", 0.5), s("7", 0.6), s("9", 0.1)]).as_deref(), Some("7"));
        // Tie: "9" has lower mean entropy.
        assert_eq!(majority_vote(&[s("7", 0.5), s("9", 0.2)]).as_deref(), Some("9"));
        assert_eq!(majority_vote(&[(None, 0.1), s("3", 0.9)]).as_deref(), Some("3"));
        assert_eq!(majority_vote(&[(None, 0.1)]), None);
    }
}
