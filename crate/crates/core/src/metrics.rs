//! Corpus BLEU@4 and CIDEr.

use std::collections::{BTreeMap, HashMap, HashSet};

use crate::error::{Error, Result};

/// One candidate per image with its references, whitespace-tokenized.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalCorpus {
    items: Vec<(Vec<String>, Vec<Vec<String>>)>,
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

impl EvalCorpus {
    pub fn new<C, R>(items: impl IntoIterator<Item = (C, Vec<R>)>) -> Result<Self>
    where
        C: AsRef<str>,
        R: AsRef<str>,
    {
        let items: Vec<_> = items
            .into_iter()
            .map(|(c, refs)| (words(c.as_ref()), refs.iter().map(|r| words(r.as_ref())).collect::<Vec<_>>()))
            .collect();
        if items.is_empty() {
            return Err(Error::Input("evaluation corpus is empty".into()));
        }
        if items.iter().any(|(_, refs)| refs.is_empty()) {
            return Err(Error::Input("every image needs at least one reference".into()));
        }
        Ok(EvalCorpus { items })
    }

    /// Pairs each candidate id with its references; ids must match exactly.
    pub fn from_maps(candidates: &BTreeMap<String, Vec<String>>, references: &BTreeMap<String, Vec<String>>) -> Result<Self> {
        let mut items = Vec::new();
        for (id, cands) in candidates {
            if cands.len() != 1 {
                return Err(Error::Input(format!("image {id:?} has {} candidates", cands.len())));
            }
            let refs = references
                .get(id)
                .ok_or_else(|| Error::Input(format!("no references for image {id:?}")))?;
            items.push((cands[0].clone(), refs.clone()));
        }
        if let Some(id) = references.keys().find(|k| !candidates.contains_key(*k)) {
            return Err(Error::Input(format!("no candidate for image {id:?}")));
        }
        Self::new(items)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// `image_id<TAB>caption` lines grouped by id, in first-seen order per id.
pub fn parse_captions(text: &str) -> Result<BTreeMap<String, Vec<String>>> {
    let mut out: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (id, cap) = line
            .split_once('\t')
            .ok_or_else(|| Error::Input(format!("caption line {} lacks a tab", i + 1)))?;
        out.entry(id.to_string()).or_default().push(cap.to_string());
    }
    Ok(out)
}

fn ngrams(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *m.entry(g).or_insert(0) += 1;
        }
    }
    m
}

/// Unsmoothed corpus BLEU with clipped 1- to 4-gram precisions and the
/// closest-reference brevity penalty.
pub fn bleu4(corpus: &EvalCorpus) -> f64 {
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (cand, refs) in &corpus.items {
        c_len += cand.len();
        r_len += refs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(cand.len()), l))
            .expect("non-empty references");
        for n in 1..=4 {
            let counts = ngrams(cand, n);
            let mut max_ref: HashMap<&[String], usize> = HashMap::new();
            for r in refs {
                for (g, c) in ngrams(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            for (g, c) in &counts {
                matched[n - 1] += (*c).min(max_ref.get(g).copied().unwrap_or(0));
                total[n - 1] += c;
            }
        }
    }
    if c_len == 0 || matched.contains(&0) {
        return 0.0;
    }
    let log_p: f64 = (0..4).map(|i| (matched[i] as f64 / total[i] as f64).ln()).sum::<f64>() / 4.0;
    let bp = if c_len > r_len { 1.0 } else { (1.0 - r_len as f64 / c_len as f64).exp() };
    bp * log_p.exp()
}

fn tfidf<'a>(tokens: &'a [String], n: usize, df: &HashMap<&[String], usize>, images: f64) -> HashMap<&'a [String], f64> {
    ngrams(tokens, n)
        .into_iter()
        .map(|(g, c)| {
            let d = df.get(g).copied().unwrap_or(0).max(1) as f64;
            (g, c as f64 * (images / d).ln())
        })
        .collect()
}

fn cosine(a: &HashMap<&[String], f64>, b: &HashMap<&[String], f64>) -> f64 {
    let na = a.values().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.values().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().filter_map(|(g, v)| b.get(g).map(|w| v * w)).sum();
    dot / (na * nb)
}

/// Plain CIDEr ×10: TF-IDF cosine per n-gram order averaged over references
/// and orders 1..4, with document frequencies taken over each image's
/// reference set. N-grams absent from every reference use a frequency of 1.
pub fn cider(corpus: &EvalCorpus) -> Result<f64> {
    let images = corpus.items.len();
    if images < 2 {
        return Err(Error::Input("CIDEr needs at least two images".into()));
    }
    let mut total = 0.0;
    let mut df_by_n: Vec<HashMap<&[String], usize>> = Vec::with_capacity(4);
    for n in 1..=4 {
        let mut df: HashMap<&[String], usize> = HashMap::new();
        for (_, refs) in &corpus.items {
            let seen: HashSet<&[String]> = refs.iter().flat_map(|r| ngrams(r, n).into_keys()).collect();
            for g in seen {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        df_by_n.push(df);
    }
    for (cand, refs) in &corpus.items {
        let mut per_image = 0.0;
        for (i, df) in df_by_n.iter().enumerate() {
            let c = tfidf(cand, i + 1, df, images as f64);
            let sim: f64 = refs
                .iter()
                .map(|r| cosine(&c, &tfidf(r, i + 1, df, images as f64)))
                .sum::<f64>()
                / refs.len() as f64;
            per_image += sim / 4.0;
        }
        total += per_image;
    }
    Ok(10.0 * total / images as f64)
}

/// `metric<TAB>value` lines with four decimals.
pub fn report(rows: &[(&str, f64)]) -> String {
    rows.iter().map(|(m, v)| format!("{m}\t{v:.4}\n")).collect()
}
