use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{normalize_directions, RoutedLm};
use crate::numerics::{Rng, Scalar, Tensor};

pub const TOP_TOKENS: usize = 10;

/// Tokens whose normalized text must match a lexicon before a direction
/// takes that category.
pub const CATEGORY_MIN_HITS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DirectionTokens {
    pub layer: usize,
    pub head: usize,
    pub k: usize,
    /// `(token id, score)`, best first.
    pub top: Vec<(u32, f64)>,
}

/// Scores of one unit direction against every vocabulary row: the direction
/// is zero-padded into its head's slice, sent through `w_out [d, d]` and
/// dotted with each row of `lm_head [V, d]`.
pub fn project_direction(unit: &[f64], head: usize, w_out: &Tensor<f64>, lm_head: &Tensor<f64>) -> Result<Vec<f64>> {
    let d = w_out.rows();
    let dh = unit.len();
    if (head + 1) * dh > d || lm_head.cols() != w_out.cols() {
        return Err(Error::shape("project_direction", w_out.shape(), lm_head.shape()));
    }
    let mut padded = vec![0.0; d];
    padded[head * dh..(head + 1) * dh].copy_from_slice(unit);
    let out = Tensor::new([1, d], padded)?.matmul(w_out)?;
    Ok((0..lm_head.rows())
        .map(|v| lm_head.row(v).iter().zip(out.data()).map(|(a, b)| a * b).sum())
        .collect())
}

/// Indices of the `k` largest scores; ties go to the smaller id.
pub fn top_k(scores: &[f64], k: usize) -> Vec<(u32, f64)> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.into_iter().take(k).map(|i| (i as u32, scores[i])).collect()
}

/// Top vocabulary tokens for every direction of a routed model.
pub fn vocab_projection<T: Scalar>(model: &RoutedLm<T>) -> Result<Vec<DirectionTokens>> {
    let c = &model.config;
    if !c.routing_active() {
        return Err(Error::Spec("vocabulary projection needs direction vectors".into()));
    }
    let lm_head = model.tok_emb.cast::<f64>();
    let mut out = Vec::new();
    for (l, b) in model.blocks.iter().enumerate() {
        let bank = normalize_directions(b.directions.as_ref().expect("routed block"))?.cast::<f64>();
        let wo = b.wo.cast::<f64>();
        for h in 0..c.n_heads {
            for k in 0..c.n_directions {
                let scores = project_direction(bank.row(h * c.n_directions + k), h, &wo, &lm_head)?;
                out.push(DirectionTokens {
                    layer: l,
                    head: h,
                    k,
                    top: top_k(&scores, TOP_TOKENS),
                });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Punctuation,
    Articles,
    Conjunctions,
    Prepositions,
    Pronouns,
    Numbers,
    Discourse,
    Content,
}

impl Category {
    /// Precedence order; the first category with enough hits wins.
    pub const ALL: [Category; 8] = [
        Category::Punctuation,
        Category::Articles,
        Category::Conjunctions,
        Category::Prepositions,
        Category::Pronouns,
        Category::Numbers,
        Category::Discourse,
        Category::Content,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::Punctuation => "punctuation",
            Category::Articles => "articles",
            Category::Conjunctions => "conjunctions",
            Category::Prepositions => "prepositions",
            Category::Pronouns => "pronouns",
            Category::Numbers => "numbers",
            Category::Discourse => "discourse",
            Category::Content => "content",
        }
    }

    pub fn lexicon(self) -> &'static [&'static str] {
        match self {
            Category::Articles => ARTICLES,
            Category::Conjunctions => CONJUNCTIONS,
            Category::Prepositions => PREPOSITIONS,
            Category::Pronouns => PRONOUNS,
            Category::Numbers => NUMBER_WORDS,
            Category::Discourse => DISCOURSE,
            Category::Punctuation | Category::Content => &[],
        }
    }

    /// Whether a normalized token text belongs to this category.
    pub fn matches(self, text: &str) -> bool {
        match self {
            Category::Punctuation => is_punctuation(text),
            Category::Numbers => is_numeral(text) || NUMBER_WORDS.contains(&text),
            Category::Content => false,
            c => c.lexicon().contains(&text),
        }
    }
}

pub const ARTICLES: &[&str] = &["a", "an", "the"];

pub const CONJUNCTIONS: &[&str] = &[
    "and", "or", "but", "nor", "yet", "so", "because", "although", "though", "whereas", "while", "if", "unless",
    "whether",
];

pub const PREPOSITIONS: &[&str] = &[
    "of", "in", "on", "at", "by", "for", "with", "from", "to", "into", "onto", "over", "under", "about", "after",
    "before", "between", "through", "during", "without", "within", "against", "among", "across", "behind", "beyond",
    "near", "since", "until", "upon", "toward", "towards", "via", "per",
];

pub const PRONOUNS: &[&str] = &[
    "i", "me", "my", "mine", "you", "your", "yours", "he", "him", "his", "she", "her", "hers", "it", "its", "we", "us",
    "our", "ours", "they", "them", "their", "theirs", "this", "that", "these", "those", "who", "whom", "whose",
    "which", "what", "myself", "yourself", "himself", "herself", "itself", "ourselves", "themselves",
];

pub const NUMBER_WORDS: &[&str] = &[
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "hundred", "thousand",
    "million", "billion", "first", "second", "third",
];

pub const DISCOURSE: &[&str] = &[
    "however", "therefore", "thus", "hence", "moreover", "furthermore", "meanwhile", "indeed", "also", "then",
    "well", "now", "instead", "otherwise", "finally", "nevertheless", "nonetheless", "besides", "consequently",
    "actually", "anyway", "likewise", "similarly",
];

/// Non-empty and made only of punctuation or symbol characters.
pub fn is_punctuation(text: &str) -> bool {
    !text.is_empty() && text.chars().all(|c| c.is_ascii_punctuation() || (!c.is_alphanumeric() && !c.is_whitespace() && !c.is_control()))
}

/// Digits with optional `.`, `,` or `-` separators.
pub fn is_numeral(text: &str) -> bool {
    text.chars().any(|c| c.is_ascii_digit()) && text.chars().all(|c| c.is_ascii_digit() || matches!(c, '.' | ',' | '-'))
}

pub fn normalize_token_text(text: &str) -> String {
    text.trim().to_lowercase()
}

/// Text of a byte-level token id. Bytes outside ASCII are not characters
/// on their own and render as `<0xNN>`, which matches no category.
pub fn byte_token_text(id: u32) -> String {
    match u8::try_from(id) {
        Ok(b) if b.is_ascii() => char::from(b).to_string(),
        _ => format!("<0x{id:02X}>"),
    }
}

pub fn categorize(texts: &[String]) -> Category {
    let norm: Vec<String> = texts.iter().map(|t| normalize_token_text(t)).collect();
    Category::ALL
        .into_iter()
        .find(|&c| c != Category::Content && norm.iter().filter(|t| c.matches(t)).count() >= CATEGORY_MIN_HITS)
        .unwrap_or(Category::Content)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategorizedDirection {
    pub layer: usize,
    pub head: usize,
    pub k: usize,
    pub tokens: Vec<String>,
    pub category: Category,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategoryReport {
    pub directions: Vec<CategorizedDirection>,
    /// Percentage of directions per category, in precedence order.
    pub distribution: Vec<(Category, f64)>,
}

pub fn categorize_directions(report: &[DirectionTokens], token_text: impl Fn(u32) -> String) -> CategoryReport {
    let directions: Vec<CategorizedDirection> = report
        .iter()
        .map(|d| {
            let tokens: Vec<String> = d.top.iter().map(|&(t, _)| token_text(t)).collect();
            CategorizedDirection {
                layer: d.layer,
                head: d.head,
                k: d.k,
                category: categorize(&tokens),
                tokens,
            }
        })
        .collect();
    let mut counts: BTreeMap<Category, usize> = BTreeMap::new();
    for d in &directions {
        *counts.entry(d.category).or_default() += 1;
    }
    let n = directions.len().max(1) as f64;
    let distribution = Category::ALL
        .into_iter()
        .map(|c| (c, 100.0 * counts.get(&c).copied().unwrap_or(0) as f64 / n))
        .collect();
    CategoryReport {
        directions,
        distribution,
    }
}

/// Every `(layer, head, k)` slot whose direction falls in `category`.
pub fn directions_in(report: &CategoryReport, category: Category) -> Vec<(usize, usize, usize)> {
    report
        .directions
        .iter()
        .filter(|d| d.category == category)
        .map(|d| (d.layer, d.head, d.k))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Geometry {
    pub count: usize,
    pub dim: usize,
    /// Cosines between all unit directions, in `(layer, head, k)` order.
    pub cosines: Vec<Vec<f64>>,
    pub within_head_mean_angle: f64,
    pub random_mean_angle: f64,
    pub effective_rank: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn angle_deg(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b).clamp(-1.0, 1.0).acos().to_degrees()
}

/// Spectral-entropy effective rank of the stacked rows.
pub fn effective_rank(rows: &[Vec<f64>]) -> f64 {
    let dim = rows.first().map_or(0, Vec::len);
    if dim == 0 {
        return 0.0;
    }
    let m = DMatrix::from_fn(rows.len(), dim, |i, j| rows[i][j]);
    let eig = SymmetricEigen::new(m.transpose() * &m);
    let lam: Vec<f64> = eig.eigenvalues.iter().map(|&x| x.max(0.0)).collect();
    let total: f64 = lam.iter().sum();
    if total == 0.0 {
        return 0.0;
    }
    let h: f64 = lam
        .iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| {
            let p = x / total;
            -p * p.ln()
        })
        .sum();
    h.exp()
}

/// Mean pairwise angle of `count` random unit vectors in `dim` dimensions.
pub fn random_mean_angle(rng: &mut Rng, count: usize, dim: usize) -> f64 {
    let vs: Vec<Vec<f64>> = (0..count)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| rng.standard_normal()).collect();
            let n = dot(&v, &v).sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
        .collect();
    let (mut sum, mut pairs) = (0.0, 0usize);
    for i in 0..count {
        for j in i + 1..count {
            sum += angle_deg(&vs[i], &vs[j]);
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        sum / pairs as f64
    }
}

/// Geometry of unit directions grouped by head (`group` consecutive rows
/// share a head).
pub fn geometry_of(units: &[Vec<f64>], group: usize, rng: &mut Rng) -> Geometry {
    let n = units.len();
    let dim = units.first().map_or(0, Vec::len);
    let cosines: Vec<Vec<f64>> = units.iter().map(|a| units.iter().map(|b| dot(a, b)).collect()).collect();
    let (mut sum, mut pairs) = (0.0, 0usize);
    for start in (0..n).step_by(group.max(1)) {
        let end = (start + group).min(n);
        for i in start..end {
            for j in i + 1..end {
                sum += angle_deg(&units[i], &units[j]);
                pairs += 1;
            }
        }
    }
    Geometry {
        count: n,
        dim,
        cosines,
        within_head_mean_angle: if pairs == 0 { 0.0 } else { sum / pairs as f64 },
        random_mean_angle: random_mean_angle(rng, n, dim),
        effective_rank: effective_rank(units),
    }
}

pub fn direction_geometry<T: Scalar>(model: &RoutedLm<T>, rng: &mut Rng) -> Result<Geometry> {
    if !model.config.routing_active() {
        return Err(Error::Spec("direction geometry needs direction vectors".into()));
    }
    let mut units = Vec::new();
    for b in &model.blocks {
        let bank = normalize_directions(b.directions.as_ref().expect("routed block"))?.cast::<f64>();
        for r in 0..bank.rows() {
            units.push(bank.row(r).to_vec());
        }
    }
    Ok(geometry_of(&units, model.config.n_directions, rng))
}
