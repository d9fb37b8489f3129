use serde::{Deserialize, Serialize};

/// Record of one compositional module run. Terminal calls appear as
/// [`TraceCall`]s without a nested trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub module: String,
    pub level: u32,
    pub steps: Vec<TraceStep>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub t: usize,
    /// Raw importance logits in child-list order; empty if the module has no
    /// importance function.
    pub logits: Vec<f64>,
    pub groups: Vec<TraceGroup>,
    pub children: Vec<TraceCall>,
    /// Norm of each part of the state entering this step.
    pub state_norms: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceGroup {
    pub members: Vec<String>,
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceCall {
    pub name: String,
    pub query_norm: f64,
    pub output_norm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<Box<Trace>>,
}

/// Rounds to 9 significant digits, the precision weights are written with.
pub fn round_sig9(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.8e}").parse().expect("formatted float parses")
}

/// Rounds a normalized group to 9 significant digits. If rounding moves
/// the sum away from 1 by more than half a unit in the last digit, the
/// largest weight absorbs the difference.
pub fn round_group(weights: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = weights.iter().map(|&w| round_sig9(w)).collect();
    let sum: f64 = out.iter().sum();
    if (sum - 1.0).abs() > 5e-10 {
        if let Some(big) = (0..out.len()).max_by(|&a, &b| out[a].total_cmp(&out[b])) {
            let rest: f64 = out
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != big)
                .map(|(_, w)| w)
                .sum();
            out[big] = round_sig9(1.0 - rest);
        }
    }
    out
}

impl Trace {
    /// Number of compositional levels in the tree, counting this one.
    pub fn depth(&self) -> usize {
        1 + self
            .steps
            .iter()
            .flat_map(|s| &s.children)
            .filter_map(|c| c.trace.as_ref().map(|t| t.depth()))
            .max()
            .unwrap_or(0)
    }

    /// Depth-first sequence of child names, each followed by its own calls.
    pub fn call_sequence(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.collect_calls(&mut out);
        out
    }

    fn collect_calls(&self, out: &mut Vec<String>) {
        for step in &self.steps {
            for c in &step.children {
                out.push(c.name.clone());
                if let Some(t) = &c.trace {
                    t.collect_calls(out);
                }
            }
        }
    }

    /// Largest `|Σ weights − 1|` over every group of every step, nested
    /// traces included.
    pub fn max_group_sum_error(&self) -> f64 {
        self.steps
            .iter()
            .flat_map(|s| {
                let own = s
                    .groups
                    .iter()
                    .map(|g| (g.weights.iter().sum::<f64>() - 1.0).abs());
                let nested = s
                    .children
                    .iter()
                    .filter_map(|c| c.trace.as_ref().map(|t| t.max_group_sum_error()));
                own.chain(nested).collect::<Vec<_>>()
            })
            .fold(0.0, f64::max)
    }

    pub fn direct_calls(&self) -> usize {
        self.steps.iter().map(|s| s.children.len()).sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trace serializes")
    }

    pub fn from_json(doc: &str) -> serde_json::Result<Self> {
        serde_json::from_str(doc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounding_keeps_nine_digits() {
        assert_eq!(round_sig9(0.123456789123), 0.123456789);
        assert_eq!(round_sig9(1.0 / 3.0), 0.333333333);
        assert_eq!(round_sig9(round_sig9(2.0 / 3.0)), round_sig9(2.0 / 3.0));
    }

    #[test]
    fn rounded_groups_still_sum_to_one() {
        let w = [0.3333333334, 0.3333333334, 0.3333333332];
        let r = round_group(&w);
        assert!((r.iter().sum::<f64>() - 1.0).abs() <= 1e-9, "{r:?}");
        let w = [0.1234567894, 0.2345678904, 0.3456789014, 0.2962964188];
        let r = round_group(&w);
        assert!((r.iter().sum::<f64>() - 1.0).abs() <= 6e-10, "{r:?}");
        assert_eq!(round_group(&[0.25, 0.75]), vec![0.25, 0.75]);
    }

    #[test]
    fn key_order_is_stable() {
        let t = Trace {
            module: "m".into(),
            level: 1,
            steps: vec![TraceStep {
                t: 1,
                logits: vec![0.5],
                groups: vec![TraceGroup {
                    members: vec!["a".into()],
                    weights: vec![1.0],
                }],
                children: vec![TraceCall {
                    name: "a".into(),
                    query_norm: 1.0,
                    output_norm: 2.0,
                    trace: None,
                }],
                state_norms: vec![3.0],
            }],
        };
        let doc = serde_json::to_string(&t).unwrap();
        let order = [
            "\"module\"",
            "\"level\"",
            "\"steps\"",
            "\"t\"",
            "\"logits\"",
            "\"groups\"",
            "\"children\"",
        ];
        let pos: Vec<usize> = order.iter().map(|k| doc.find(k).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]), "{doc}");
        assert_eq!(Trace::from_json(&doc).unwrap(), t);
    }
}
