//! Preference-pair data model: a fixed 64-symbol character tokenizer, JSONL
//! ingestion, a deterministic stratified split, and a synthetic generator
//! producing multi-preference datasets with controllable chosen/rejected
//! lexical gap and inter-preference conflict.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numcore::Rng;

/// The full tokenizer alphabet; token id = byte position in this string.
pub const ALPHABET: &str = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789 .";

/// Number of distinct tokens (matches the backbone's default vocabulary).
pub const VOCAB_SIZE: usize = 64;

/// One preference-labelled comparison: the same prompt with a preferred and a
/// dispreferred response, all token lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreferencePair {
    pub prompt: Vec<usize>,
    pub chosen: Vec<usize>,
    pub rejected: Vec<usize>,
    pub preference_id: usize,
}

/// Parameters of the synthetic generator.
///
/// `gap` in (0, 1] is the fraction of rejected-response characters drawn from
/// an off-style foil vocabulary; `conflict` in [0, 1] is the fraction of each
/// preference's prompts that are shared with a partner preference with
/// chosen/rejected swapped.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SyntheticSpec {
    pub n_preferences: usize,
    pub pairs_per_preference: usize,
    pub gap: f64,
    pub conflict: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_preferences == 0 || self.n_preferences > 8 {
            return Err(Error::Config(format!(
                "n_preferences must be in 1..=8, got {}",
                self.n_preferences
            )));
        }
        if self.pairs_per_preference == 0 {
            return Err(Error::Config("pairs_per_preference must be >= 1".into()));
        }
        if !(self.gap > 0.0 && self.gap <= 1.0) {
            return Err(Error::Config(format!("gap must be in (0, 1], got {}", self.gap)));
        }
        if !(0.0..=1.0).contains(&self.conflict) {
            return Err(Error::Config(format!(
                "conflict must be in [0, 1], got {}",
                self.conflict
            )));
        }
        Ok(())
    }
}

fn token_of(c: char) -> Result<usize> {
    ALPHABET
        .find(c)
        .ok_or_else(|| Error::Data(format!("character {c:?} is outside the 64-symbol alphabet")))
}

/// Char-level encoding over [`ALPHABET`]; exact inverse of [`detokenize`].
pub fn tokenize(text: &str) -> Result<Vec<usize>> {
    text.chars().map(token_of).collect()
}

/// Inverse of [`tokenize`]; errors on out-of-range token ids.
pub fn detokenize(tokens: &[usize]) -> Result<String> {
    tokens
        .iter()
        .map(|&t| {
            ALPHABET
                .as_bytes()
                .get(t)
                .map(|&b| b as char)
                .ok_or_else(|| Error::Data(format!("token id {t} outside vocabulary")))
        })
        .collect()
}

// Three uppercase marker characters unique to each preference's style.
fn style_chars(pref: usize) -> &'static [u8] {
    const MARKERS: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWX";
    &MARKERS[pref * 3..pref * 3 + 3]
}

const FOIL_CHARS: &[u8] = b"0123456789";
const PROMPT_CHARS: &[u8] = b"abcdefghijklmnopqrstuvwxyz";

fn sample_string(rng: &mut Rng, chars: &[u8], len: usize) -> Vec<usize> {
    (0..len)
        .map(|_| token_of(chars[rng.below(chars.len())] as char).unwrap())
        .collect()
}

fn sample_response(rng: &mut Rng, pref: usize, gap: f64, off_style: bool) -> Vec<usize> {
    let len = 6 + rng.below(5);
    let own = style_chars(pref);
    (0..len)
        .map(|_| {
            let c = if off_style && rng.uniform() < gap {
                FOIL_CHARS[rng.below(FOIL_CHARS.len())]
            } else {
                own[rng.below(own.len())]
            };
            token_of(c as char).unwrap()
        })
        .collect()
}

/// Deterministic synthetic dataset; see [`SyntheticSpec`] for the knobs.
///
/// Each preference has a disjoint 3-character marker vocabulary. Chosen
/// responses are pure style; rejected responses mix in foil characters in
/// proportion to `gap`. Conflict pairs share one prompt between two partner
/// preferences with the chosen and rejected responses swapped.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec) -> Result<Vec<PreferencePair>> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let n = spec.n_preferences;
    let n_conflict = (spec.conflict * spec.pairs_per_preference as f64).round() as usize;
    let mut out = Vec::new();

    // Partner preferences (0,1), (2,3), ...; an unpaired last preference
    // gets no conflict pairs.
    for i in (0..n).step_by(2) {
        let Some(j) = (i + 1 < n).then_some(i + 1) else { continue };
        for _ in 0..n_conflict {
            let plen = 5 + rng.below(4);
            let prompt = sample_string(&mut rng, PROMPT_CHARS, plen);
            let ri = sample_response(&mut rng, i, spec.gap, false);
            let rj = sample_response(&mut rng, j, spec.gap, false);
            out.push(PreferencePair {
                prompt: prompt.clone(),
                chosen: ri.clone(),
                rejected: rj.clone(),
                preference_id: i,
            });
            out.push(PreferencePair { prompt, chosen: rj, rejected: ri, preference_id: j });
        }
    }

    for pref in 0..n {
        let paired = pref + 1 < n || pref % 2 == 1;
        let normal = if paired {
            spec.pairs_per_preference - n_conflict.min(spec.pairs_per_preference)
        } else {
            spec.pairs_per_preference
        };
        for _ in 0..normal {
            let plen = 5 + rng.below(4);
            let prompt = sample_string(&mut rng, PROMPT_CHARS, plen);
            let chosen = sample_response(&mut rng, pref, spec.gap, false);
            let mut rejected = sample_response(&mut rng, pref, spec.gap, true);
            while rejected == chosen {
                rejected = sample_response(&mut rng, pref, spec.gap, true);
            }
            out.push(PreferencePair { prompt, chosen, rejected, preference_id: pref });
        }
    }
    Ok(out)
}

fn field_str<'a>(obj: &'a serde_json::Value, key: &str, line: usize) -> Result<&'a str> {
    obj.get(key)
        .and_then(|v| v.as_str())
        .ok_or_else(|| Error::Parse { line, msg: format!("missing or non-string field {key:?}") })
}

/// Loads pairs from a JSONL file with objects
/// `{"prompt", "chosen", "rejected", "preference"}`. The preference field may
/// be an integer id or a string name; names are assigned ids in order of
/// first appearance. Errors carry 1-based line numbers.
pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Vec<PreferencePair>> {
    let file = std::fs::File::open(path.as_ref())?;
    let mut pairs = Vec::new();
    let mut names: HashMap<String, usize> = HashMap::new();
    for (idx, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let raw = line?;
        if raw.trim().is_empty() {
            continue;
        }
        let obj: serde_json::Value = serde_json::from_str(&raw)
            .map_err(|e| Error::Parse { line: line_no, msg: e.to_string() })?;
        let wrap = |e: Error| match e {
            Error::Data(msg) => Error::Parse { line: line_no, msg },
            other => other,
        };
        let prompt = tokenize(field_str(&obj, "prompt", line_no)?).map_err(wrap)?;
        let chosen = tokenize(field_str(&obj, "chosen", line_no)?).map_err(wrap)?;
        let rejected = tokenize(field_str(&obj, "rejected", line_no)?).map_err(wrap)?;
        let preference_id = match obj.get("preference") {
            Some(v) if v.is_u64() => v.as_u64().unwrap() as usize,
            Some(v) if v.is_string() => {
                let next = names.len();
                *names.entry(v.as_str().unwrap().to_string()).or_insert(next)
            }
            _ => {
                return Err(Error::Parse {
                    line: line_no,
                    msg: "preference must be a non-negative integer or string".into(),
                })
            }
        };
        if prompt.is_empty() || chosen.is_empty() || rejected.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                msg: "prompt, chosen and rejected must be non-empty".into(),
            });
        }
        if chosen == rejected {
            return Err(Error::Parse { line: line_no, msg: "chosen equals rejected".into() });
        }
        pairs.push(PreferencePair { prompt, chosen, rejected, preference_id });
    }
    Ok(pairs)
}

/// Writes pairs in the same JSONL schema that [`load_jsonl`] reads.
pub fn save_jsonl(path: impl AsRef<Path>, pairs: &[PreferencePair]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    for p in pairs {
        let obj = serde_json::json!({
            "prompt": detokenize(&p.prompt)?,
            "chosen": detokenize(&p.chosen)?,
            "rejected": detokenize(&p.rejected)?,
            "preference": p.preference_id,
        });
        writeln!(f, "{obj}")?;
    }
    Ok(())
}

/// Errors if any preference id is >= `num_preferences`.
pub fn check_preference_ids(pairs: &[PreferencePair], num_preferences: usize) -> Result<()> {
    for (i, p) in pairs.iter().enumerate() {
        if p.preference_id >= num_preferences {
            return Err(Error::Data(format!(
                "pair {i}: unknown preference id {} (have {num_preferences})",
                p.preference_id
            )));
        }
    }
    Ok(())
}

/// Deterministic split, stratified by preference id. Each preference
/// contributes round(n·fraction) pairs to the train side, clamped so both
/// sides stay non-empty.
pub fn split(
    pairs: &[PreferencePair],
    train_fraction: f64,
    rng: &mut Rng,
) -> Result<(Vec<PreferencePair>, Vec<PreferencePair>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train_fraction must be in (0, 1), got {train_fraction}"
        )));
    }
    let mut by_pref: HashMap<usize, Vec<usize>> = HashMap::new();
    for (i, p) in pairs.iter().enumerate() {
        by_pref.entry(p.preference_id).or_default().push(i);
    }
    let mut prefs: Vec<usize> = by_pref.keys().copied().collect();
    prefs.sort_unstable();
    let (mut train, mut held) = (Vec::new(), Vec::new());
    for pref in prefs {
        let idx = by_pref.get_mut(&pref).unwrap();
        if idx.len() < 2 {
            return Err(Error::Data(format!(
                "preference {pref} has {} pair(s); need at least 2 to split",
                idx.len()
            )));
        }
        rng.shuffle(idx);
        let n_train =
            ((idx.len() as f64 * train_fraction).round() as usize).clamp(1, idx.len() - 1);
        for (pos, &i) in idx.iter().enumerate() {
            if pos < n_train {
                train.push(pairs[i].clone());
            } else {
                held.push(pairs[i].clone());
            }
        }
    }
    Ok((train, held))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_round_trips() {
        assert_eq!(tokenize("").unwrap(), Vec::<usize>::new());
        assert_eq!(detokenize(&[]).unwrap(), "");
        assert_eq!(tokenize("ab").unwrap(), vec![0, 1]);
        let mut rng = Rng::new(7);
        let bytes: Vec<u8> = (0..200)
            .map(|_| ALPHABET.as_bytes()[rng.below(64)])
            .collect();
        let s = String::from_utf8(bytes).unwrap();
        assert_eq!(detokenize(&tokenize(&s).unwrap()).unwrap(), s);
        assert!(tokenize("héllo").is_err());
        assert!(detokenize(&[64]).is_err());
    }

    #[test]
    fn generator_is_deterministic_and_valid() {
        let spec = SyntheticSpec {
            n_preferences: 3,
            pairs_per_preference: 20,
            gap: 0.5,
            conflict: 0.25,
            seed: 99,
        };
        let a = generate_synthetic_dataset(&spec).unwrap();
        let b = generate_synthetic_dataset(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 60);
        for p in &a {
            assert!(p.chosen != p.rejected);
            assert!(!p.prompt.is_empty() && !p.chosen.is_empty() && !p.rejected.is_empty());
            assert!(p.preference_id < 3);
        }
        for pref in 0..3 {
            assert_eq!(a.iter().filter(|p| p.preference_id == pref).count(), 20);
        }
    }

    #[test]
    fn full_conflict_swaps_chosen_and_rejected() {
        let spec = SyntheticSpec {
            n_preferences: 2,
            pairs_per_preference: 10,
            gap: 1.0,
            conflict: 1.0,
            seed: 5,
        };
        let pairs = generate_synthetic_dataset(&spec).unwrap();
        let p0: Vec<_> = pairs.iter().filter(|p| p.preference_id == 0).collect();
        let p1: Vec<_> = pairs.iter().filter(|p| p.preference_id == 1).collect();
        assert_eq!(p0.len(), 10);
        for a in &p0 {
            let twin = p1
                .iter()
                .find(|b| b.prompt == a.prompt)
                .expect("conflict prompt shared across preferences");
            assert_eq!(twin.chosen, a.rejected);
            assert_eq!(twin.rejected, a.chosen);
        }
    }

    // Bag-of-tokens logistic regression, trained by plain gradient descent.
    // Independent of the model code; used as the separability oracle.
    fn logistic_accuracy(pairs: &[&PreferencePair]) -> f64 {
        let mut w = vec![0.0f64; VOCAB_SIZE];
        let mut b = 0.0f64;
        let feats = |toks: &[usize]| {
            let mut f = vec![0.0f64; VOCAB_SIZE];
            for &t in toks {
                f[t] += 1.0;
            }
            f
        };
        let mut examples = Vec::new();
        for p in pairs {
            examples.push((feats(&p.chosen), 1.0));
            examples.push((feats(&p.rejected), 0.0));
        }
        for _ in 0..300 {
            let (mut gw, mut gb) = (vec![0.0f64; VOCAB_SIZE], 0.0f64);
            for (f, y) in &examples {
                let z: f64 = b + w.iter().zip(f).map(|(a, c)| a * c).sum::<f64>();
                let p = 1.0 / (1.0 + (-z).exp());
                let e = p - y;
                gb += e;
                for (g, c) in gw.iter_mut().zip(f) {
                    *g += e * c;
                }
            }
            let n = examples.len() as f64;
            b -= 0.5 * gb / n;
            for (wi, g) in w.iter_mut().zip(&gw) {
                *wi -= 0.5 * g / n;
            }
        }
        let correct = examples
            .iter()
            .filter(|(f, y)| {
                let z: f64 = b + w.iter().zip(f).map(|(a, c)| a * c).sum::<f64>();
                (z > 0.0) == (*y > 0.5)
            })
            .count();
        correct as f64 / examples.len() as f64
    }

    #[test]
    fn max_gap_no_conflict_is_linearly_separable() {
        let spec = SyntheticSpec {
            n_preferences: 2,
            pairs_per_preference: 25,
            gap: 1.0,
            conflict: 0.0,
            seed: 11,
        };
        let pairs = generate_synthetic_dataset(&spec).unwrap();
        for pref in 0..2 {
            let subset: Vec<_> = pairs.iter().filter(|p| p.preference_id == pref).collect();
            let acc = logistic_accuracy(&subset);
            assert!((acc - 1.0).abs() < 1e-12, "preference {pref}: accuracy {acc}");
        }
    }

    #[test]
    fn spec_validation_rejects_out_of_range() {
        let ok = SyntheticSpec {
            n_preferences: 2,
            pairs_per_preference: 4,
            gap: 0.5,
            conflict: 0.0,
            seed: 0,
        };
        assert!(ok.validate().is_ok());
        assert!(SyntheticSpec { gap: 0.0, ..ok }.validate().is_err());
        assert!(SyntheticSpec { gap: 1.5, ..ok }.validate().is_err());
        assert!(SyntheticSpec { conflict: -0.1, ..ok }.validate().is_err());
        assert!(SyntheticSpec { n_preferences: 0, ..ok }.validate().is_err());
        assert!(SyntheticSpec { n_preferences: 9, ..ok }.validate().is_err());
        assert!(SyntheticSpec { pairs_per_preference: 0, ..ok }.validate().is_err());
    }

    #[test]
    fn jsonl_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.jsonl");

        let spec = SyntheticSpec {
            n_preferences: 2,
            pairs_per_preference: 5,
            gap: 1.0,
            conflict: 0.2,
            seed: 3,
        };
        let pairs = generate_synthetic_dataset(&spec).unwrap();
        save_jsonl(&path, &pairs).unwrap();
        assert_eq!(load_jsonl(&path).unwrap(), pairs);

        std::fs::write(&path, "").unwrap();
        assert!(load_jsonl(&path).unwrap().is_empty());

        std::fs::write(
            &path,
            concat!(
                "{\"prompt\":\"ab\",\"chosen\":\"cd\",\"rejected\":\"ef\",\"preference\":0}\n",
                "{\"prompt\":\"ab\",\"chosen\":\"cd\",\"rejected\":\"cd\",\"preference\":0}\n",
            ),
        )
        .unwrap();
        let err = load_jsonl(&path).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
        assert!(err.contains("chosen equals rejected"), "{err}");

        std::fs::write(&path, "not json\n").unwrap();
        let err = load_jsonl(&path).unwrap_err().to_string();
        assert!(err.contains("line 1"), "{err}");

        std::fs::write(
            &path,
            "{\"prompt\":\"ab\",\"chosen\":\"c\",\"rejected\":\"d\",\"preference\":\"helpful\"}\n",
        )
        .unwrap();
        let loaded = load_jsonl(&path).unwrap();
        assert_eq!(loaded[0].preference_id, 0);
    }

    #[test]
    fn split_is_stratified_and_deterministic() {
        let spec = SyntheticSpec {
            n_preferences: 3,
            pairs_per_preference: 100,
            gap: 0.5,
            conflict: 0.0,
            seed: 21,
        };
        let pairs = generate_synthetic_dataset(&spec).unwrap();
        let (tr, he) = split(&pairs, 0.9, &mut Rng::new(7)).unwrap();
        let (tr2, he2) = split(&pairs, 0.9, &mut Rng::new(7)).unwrap();
        assert_eq!(tr, tr2);
        assert_eq!(he, he2);
        for pref in 0..3 {
            assert_eq!(tr.iter().filter(|p| p.preference_id == pref).count(), 90);
            assert_eq!(he.iter().filter(|p| p.preference_id == pref).count(), 10);
        }
        assert!(split(&pairs, 1.0, &mut Rng::new(7)).is_err());
        assert!(split(&pairs, 0.0, &mut Rng::new(7)).is_err());
        let tiny = vec![pairs[0].clone()];
        assert!(split(&tiny, 0.5, &mut Rng::new(7)).is_err());
    }
}
