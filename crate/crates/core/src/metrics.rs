//! Wasserstein-1 distance on empirical score distributions and the
//! individual / group fairness aggregates built on it.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const REPORT_SCHEMA: &str = "fairlm-report/v1";

/// An empirical distribution of scores in `[0, 1]`, kept sorted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ScoreDistribution {
    samples: Vec<f64>,
}

impl ScoreDistribution {
    pub fn new(mut samples: Vec<f64>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyDistribution);
        }
        if let Some(&bad) = samples.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::InvalidScore(bad));
        }
        samples.sort_by(f64::total_cmp);
        Ok(Self { samples })
    }

    /// Multiset union of several distributions.
    pub fn pooled<'a>(parts: impl IntoIterator<Item = &'a ScoreDistribution>) -> Result<Self> {
        Self::new(parts.into_iter().flat_map(|d| d.samples.iter().copied()).collect())
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn count(&self) -> usize {
        self.samples.len()
    }

    pub fn mean(&self) -> f64 {
        self.samples.iter().sum::<f64>() / self.samples.len() as f64
    }

    /// Empirical `Pr(S > tau)`.
    pub fn exceedance(&self, tau: f64) -> f64 {
        let at_most = self.samples.partition_point(|&s| s <= tau);
        (self.samples.len() - at_most) as f64 / self.samples.len() as f64
    }
}

impl TryFrom<Vec<f64>> for ScoreDistribution {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ScoreDistribution> for Vec<f64> {
    fn from(d: ScoreDistribution) -> Self {
        d.samples
    }
}

/// Exact W1 between two empirical distributions: the integral of
/// `|F_p(t) - F_q(t)|` over the pooled sorted breakpoints. O(n + m).
pub fn wasserstein1(p: &ScoreDistribution, q: &ScoreDistribution) -> f64 {
    let (a, b) = (&p.samples, &q.samples);
    let (n, m) = (a.len(), b.len());
    let denom = (n * m) as f64;
    let (mut i, mut j) = (0, 0);
    let mut prev = a[0].min(b[0]);
    let mut total = 0.0;
    while i < n || j < m {
        let next = match (a.get(i), b.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => unreachable!(),
        };
        // F_p = i/n and F_q = j/m on [prev, next)
        let gap = (i * m).abs_diff(j * n) as f64 / denom;
        total += gap * (next - prev);
        while i < n && a[i] == next {
            i += 1;
        }
        while j < m && b[j] == next {
            j += 1;
        }
        prev = next;
    }
    total
}

/// `|Pr(p > tau) - Pr(q > tau)|`.
pub fn demographic_disparity(p: &ScoreDistribution, q: &ScoreDistribution, tau: f64) -> f64 {
    (p.exceedance(tau) - q.exceedance(tau)).abs()
}

/// Key of a per-template distribution: (template id, attribute value).
pub type TemplateKey = (u32, String);

/// W1 for every template and every unordered pair of distinct values.
/// Keys are `(template, a, b)` with `a < b`.
pub fn pairwise_w1(
    dists: &BTreeMap<TemplateKey, ScoreDistribution>,
    templates: &[u32],
    values: &[&str],
) -> Result<BTreeMap<(u32, String, String), f64>> {
    let mut values: Vec<&str> = values.to_vec();
    values.sort_unstable();
    values.dedup();
    if values.len() < 2 {
        return Err(Error::TooFewValues(values.len()));
    }
    let mut templates = templates.to_vec();
    templates.sort_unstable();
    templates.dedup();
    let lookup = |t: u32, v: &str| {
        dists
            .get(&(t, v.to_string()))
            .ok_or_else(|| Error::MissingDistribution { template: t, value: v.to_string() })
    };
    let mut out = BTreeMap::new();
    for &t in &templates {
        for (k, a) in values.iter().enumerate() {
            for b in &values[k + 1..] {
                let w = wasserstein1(lookup(t, a)?, lookup(t, b)?);
                out.insert((t, a.to_string(), b.to_string()), w);
            }
        }
    }
    Ok(out)
}

/// Average individual fairness: the mean of all `M * |A| (|A| - 1) / 2`
/// pairwise W1 distances.
pub fn individual_fairness(
    dists: &BTreeMap<TemplateKey, ScoreDistribution>,
    templates: &[u32],
    values: &[&str],
) -> Result<f64> {
    let pairs = pairwise_w1(dists, templates, values)?;
    if pairs.is_empty() {
        return Err(Error::EmptyTemplates);
    }
    Ok(pairs.values().sum::<f64>() / pairs.len() as f64)
}

/// Average group fairness: mean over subgroups of W1 to the pooled
/// distribution. Returns the pooled distribution too.
pub fn group_fairness(subgroups: &BTreeMap<String, ScoreDistribution>) -> Result<(f64, ScoreDistribution)> {
    let (per_group, pooled) = subgroup_w1(subgroups)?;
    let gf = per_group.values().sum::<f64>() / per_group.len() as f64;
    Ok((gf, pooled))
}

/// W1 of each subgroup against the pooled distribution.
pub fn subgroup_w1(
    subgroups: &BTreeMap<String, ScoreDistribution>,
) -> Result<(BTreeMap<String, f64>, ScoreDistribution)> {
    if subgroups.is_empty() {
        return Err(Error::EmptyDistribution);
    }
    let pooled = ScoreDistribution::pooled(subgroups.values())?;
    let per_group = subgroups
        .iter()
        .map(|(k, d)| (k.clone(), wasserstein1(d, &pooled)))
        .collect();
    Ok((per_group, pooled))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseW1 {
    pub template_id: u32,
    pub value_a: String,
    pub value_b: String,
    pub w1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupW1 {
    pub value: String,
    pub w1: f64,
}

/// Language-model quality numbers reported next to the fairness metrics.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QualityMetrics {
    pub ppl: Option<f64>,
    pub ppl_subset: Option<f64>,
    pub semantic_similarity: Option<f64>,
    pub mention_fraction: Option<f64>,
}

/// Fairness evaluation of one model on one attribute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub schema: String,
    pub attribute: String,
    pub individual_fairness: f64,
    pub group_fairness: f64,
    pub pairwise_w1: Vec<PairwiseW1>,
    pub subgroup_w1: Vec<SubgroupW1>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub is_fair: Option<bool>,
    #[serde(default)]
    pub quality: QualityMetrics,
    /// Sorted score samples per (template, value), only when requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<Vec<TemplateSamples>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateSamples {
    pub template_id: u32,
    pub value: String,
    pub scores: ScoreDistribution,
}

impl FairnessReport {
    /// Computes both aggregates from per-template and per-subgroup distributions.
    pub fn compute(
        attribute: &str,
        per_template: &BTreeMap<TemplateKey, ScoreDistribution>,
        templates: &[u32],
        values: &[&str],
        subgroups: &BTreeMap<String, ScoreDistribution>,
        epsilon: Option<f64>,
    ) -> Result<Self> {
        let pairs = pairwise_w1(per_template, templates, values)?;
        if pairs.is_empty() {
            return Err(Error::EmptyTemplates);
        }
        let individual = pairs.values().sum::<f64>() / pairs.len() as f64;
        let (per_group, _) = subgroup_w1(subgroups)?;
        let group = per_group.values().sum::<f64>() / per_group.len() as f64;
        Ok(Self {
            schema: REPORT_SCHEMA.to_string(),
            attribute: attribute.to_string(),
            individual_fairness: individual,
            group_fairness: group,
            is_fair: epsilon.map(|eps| pairs.values().all(|&w| w < eps)),
            epsilon,
            pairwise_w1: pairs
                .into_iter()
                .map(|((template_id, value_a, value_b), w1)| PairwiseW1 { template_id, value_a, value_b, w1 })
                .collect(),
            subgroup_w1: per_group.into_iter().map(|(value, w1)| SubgroupW1 { value, w1 }).collect(),
            quality: QualityMetrics::default(),
            samples: None,
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: Self = serde_json::from_str(text).map_err(|e| Error::json("<report>", e))?;
        if report.schema != REPORT_SCHEMA {
            return Err(Error::CheckpointVersion { found: report.schema, expected: REPORT_SCHEMA.into() });
        }
        Ok(report)
    }

    /// One row per pairwise and per subgroup distance.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["kind", "template_id", "value_a", "value_b", "w1"]).unwrap();
        for p in &self.pairwise_w1 {
            w.write_record(["pairwise", &p.template_id.to_string(), &p.value_a, &p.value_b, &p.w1.to_string()])
                .unwrap();
        }
        for g in &self.subgroup_w1 {
            w.write_record(["subgroup", "", &g.value, "*", &g.w1.to_string()]).unwrap();
        }
        String::from_utf8(w.into_inner().unwrap()).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dist(v: &[f64]) -> ScoreDistribution {
        ScoreDistribution::new(v.to_vec()).unwrap()
    }

    /// Midpoint-rule integral of |F_p - F_q| on a uniform grid over [0, 1].
    fn grid_w1(p: &ScoreDistribution, q: &ScoreDistribution, points: usize) -> f64 {
        let cdf = |d: &ScoreDistribution, t: f64| d.samples().iter().filter(|&&s| s <= t).count() as f64 / d.count() as f64;
        let h = 1.0 / points as f64;
        (0..points).map(|k| (k as f64 + 0.5) * h).map(|t| (cdf(p, t) - cdf(q, t)).abs() * h).sum()
    }

    #[test]
    fn w1_examples() {
        assert!((wasserstein1(&dist(&[0.2; 3]), &dist(&[0.7; 3])) - 0.5).abs() < 1e-12);
        let p = dist(&[0.3, 0.1, 0.8]);
        assert_eq!(wasserstein1(&p, &p), 0.0);
        assert!((wasserstein1(&dist(&[0.1, 0.5, 0.9]), &dist(&[0.2, 0.6, 1.0])) - 0.1).abs() < 1e-12);
        // frozen from grid_w1 with 10^6 points: 0.5
        let (a, b) = (dist(&[0.0, 1.0]), dist(&[0.5]));
        assert!((grid_w1(&a, &b, 1_000_000) - 0.5).abs() < 1e-6);
        assert!((wasserstein1(&a, &b) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn distribution_validation() {
        assert!(matches!(ScoreDistribution::new(vec![]), Err(Error::EmptyDistribution)));
        assert!(matches!(ScoreDistribution::new(vec![0.2, 1.5]), Err(Error::InvalidScore(_))));
        assert!(ScoreDistribution::new(vec![f64::NAN]).is_err());
        assert_eq!(dist(&[0.9, 0.1, 0.5]).samples(), &[0.1, 0.5, 0.9]);
    }

    #[test]
    fn disparity_examples() {
        let p = dist(&[0.1, 0.6, 0.7, 0.8, 0.9]);
        assert_eq!(demographic_disparity(&p, &p, 0.3), 0.0);
        let p = dist(&[0.6, 0.7, 0.8, 0.9, 0.1, 0.6, 0.7, 0.8, 0.9, 0.2]);
        let q = dist(&[0.6, 0.7, 0.8, 0.1, 0.2, 0.3, 0.4, 0.1, 0.2, 0.3]);
        assert!((demographic_disparity(&p, &q, 0.5) - 0.5).abs() < 1e-12);
        assert_eq!(demographic_disparity(&dist(&[1.0, 0.2]), &dist(&[0.0]), 1.0), 0.0);
        // strict inequality: a sample equal to tau is not counted
        assert_eq!(dist(&[0.5]).exceedance(0.5), 0.0);
    }

    fn key(t: u32, v: &str) -> TemplateKey {
        (t, v.to_string())
    }

    #[test]
    fn individual_fairness_examples() {
        let mut d = BTreeMap::new();
        d.insert(key(1, "a"), dist(&[0.2]));
        d.insert(key(1, "b"), dist(&[0.5]));
        let w = wasserstein1(&dist(&[0.2]), &dist(&[0.5]));
        assert_eq!(individual_fairness(&d, &[1], &["a", "b"]).unwrap(), w);

        let mut same = BTreeMap::new();
        for t in 1..=3 {
            for v in ["a", "b", "c"] {
                same.insert(key(t, v), dist(&[0.1, 0.4, 0.4]));
            }
        }
        assert_eq!(individual_fairness(&same, &[1, 2, 3], &["a", "b", "c"]).unwrap(), 0.0);

        let mut two = BTreeMap::new();
        two.insert(key(1, "a"), dist(&[0.1]));
        two.insert(key(1, "b"), dist(&[0.2]));
        two.insert(key(2, "a"), dist(&[0.5]));
        two.insert(key(2, "b"), dist(&[0.8]));
        assert!((individual_fairness(&two, &[1, 2], &["a", "b"]).unwrap() - 0.2).abs() < 1e-12);

        assert!(matches!(
            individual_fairness(&two, &[1, 3], &["a", "b"]),
            Err(Error::MissingDistribution { template: 3, .. })
        ));
        assert!(matches!(individual_fairness(&two, &[1], &["a"]), Err(Error::TooFewValues(1))));
    }

    #[test]
    fn group_fairness_examples() {
        let mut one = BTreeMap::new();
        one.insert("a".to_string(), dist(&[0.1, 0.9]));
        assert_eq!(group_fairness(&one).unwrap().0, 0.0);

        // pooled {0,0,1,1}; each subgroup's distance to it
        let mut two = BTreeMap::new();
        two.insert("a".to_string(), dist(&[0.0, 0.0]));
        two.insert("b".to_string(), dist(&[1.0, 1.0]));
        let (gf, pooled) = group_fairness(&two).unwrap();
        assert_eq!(pooled.samples(), &[0.0, 0.0, 1.0, 1.0]);
        assert!((gf - 0.5).abs() < 1e-12);

        let mut same = BTreeMap::new();
        for v in ["a", "b", "c"] {
            same.insert(v.to_string(), dist(&[0.3, 0.6, 0.6]));
        }
        assert_eq!(group_fairness(&same).unwrap().0, 0.0);
        assert!(group_fairness(&BTreeMap::new()).is_err());
    }

    #[test]
    fn group_fairness_is_mean_of_subgroup_distances() {
        // distances to pooled {0.2, 0.4, 0.4, 0.6}: a={0.2,0.4} -> 0.1, b={0.4,0.6} -> 0.1
        let mut g = BTreeMap::new();
        g.insert("a".to_string(), dist(&[0.2, 0.4]));
        g.insert("b".to_string(), dist(&[0.4, 0.6]));
        let (per, _) = subgroup_w1(&g).unwrap();
        let mean = per.values().sum::<f64>() / 2.0;
        assert_eq!(group_fairness(&g).unwrap().0, mean);
    }

    #[test]
    fn report_invariants_and_formats() {
        let mut per_template = BTreeMap::new();
        per_template.insert(key(1, "a"), dist(&[0.0, 1.0]));
        per_template.insert(key(1, "b"), dist(&[1.0, 1.0]));
        let mut groups = BTreeMap::new();
        groups.insert("a".to_string(), dist(&[0.0, 1.0]));
        groups.insert("b".to_string(), dist(&[1.0, 1.0]));
        let r = FairnessReport::compute("X", &per_template, &[1], &["b", "a"], &groups, Some(0.4)).unwrap();
        assert_eq!(r.individual_fairness, 0.5);
        assert_eq!(r.is_fair, Some(false));
        assert_eq!(r.pairwise_w1[0].value_a, "a");
        let again = FairnessReport::from_json(&r.to_json()).unwrap();
        assert_eq!(again, r);
        let csv = r.to_csv();
        assert!(csv.starts_with("kind,template_id,value_a,value_b,w1\n"));
        assert_eq!(csv.lines().count(), 1 + 1 + 2);
        let r2 = FairnessReport::compute("X", &per_template, &[1], &["a", "b"], &groups, Some(0.6)).unwrap();
        assert_eq!(r2.is_fair, Some(true));
    }

    fn arb_dist() -> impl Strategy<Value = ScoreDistribution> {
        proptest::collection::vec(0.0f64..=1.0, 1..13).prop_map(|v| ScoreDistribution::new(v).unwrap())
    }

    proptest! {
        #[test]
        fn w1_is_a_metric(p in arb_dist(), q in arb_dist(), r in arb_dist()) {
            let pq = wasserstein1(&p, &q);
            prop_assert!(pq >= 0.0);
            prop_assert!((pq - wasserstein1(&q, &p)).abs() < 1e-12);
            prop_assert!(wasserstein1(&p, &r) <= pq + wasserstein1(&q, &r) + 1e-12);
            prop_assert_eq!(wasserstein1(&p, &p), 0.0);
        }

        #[test]
        fn w1_matches_grid_oracle(p in arb_dist(), q in arb_dist()) {
            prop_assert!((wasserstein1(&p, &q) - grid_w1(&p, &q, 200_000)).abs() < 1e-4);
        }

        #[test]
        fn translation(v in proptest::collection::vec(0.1f64..0.6, 1..10), w in proptest::collection::vec(0.1f64..0.6, 1..10), delta in 0.0f64..0.3) {
            let p = ScoreDistribution::new(v.clone()).unwrap();
            let q = ScoreDistribution::new(w.clone()).unwrap();
            let shift = |x: &[f64]| ScoreDistribution::new(x.iter().map(|s| s + delta).collect()).unwrap();
            let base = wasserstein1(&p, &q);
            prop_assert!((wasserstein1(&shift(&v), &shift(&w)) - base).abs() < 1e-12);
            prop_assert!((wasserstein1(&p, &shift(&w)) - base).abs() <= delta + 1e-12);
            let point = ScoreDistribution::new(vec![v[0]; 3]).unwrap();
            let moved = ScoreDistribution::new(vec![v[0] + delta; 3]).unwrap();
            prop_assert!((wasserstein1(&point, &moved) - delta).abs() < 1e-12);
        }

        #[test]
        fn aggregates_ignore_order(
            samples in proptest::collection::vec(proptest::collection::vec(0.0f64..=1.0, 1..6), 6),
        ) {
            // 2 templates x 3 values
            let values = ["a", "b", "c"];
            let mut d = BTreeMap::new();
            let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for (k, s) in samples.iter().enumerate() {
                let (t, v) = (k as u32 / 3 + 1, values[k % 3]);
                let mut rev = s.clone();
                rev.reverse();
                d.insert((t, v.to_string()), ScoreDistribution::new(rev).unwrap());
                groups.entry(v.to_string()).or_default().extend(s);
            }
            let groups: BTreeMap<String, ScoreDistribution> =
                groups.into_iter().map(|(k, v)| (k, ScoreDistribution::new(v).unwrap())).collect();
            let a = individual_fairness(&d, &[1, 2], &values).unwrap();
            let b = individual_fairness(&d, &[2, 1], &["c", "a", "b"]).unwrap();
            prop_assert_eq!(a, b);
            prop_assert!(group_fairness(&groups).unwrap().0 >= 0.0);
        }
    }
}
