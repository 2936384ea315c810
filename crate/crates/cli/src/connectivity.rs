//! Plot-ready edge lists of the strongest connections, tagged by brain
//! network.

use std::fmt::Write as _;
use std::path::Path;

use connex_core::explain::ExplanationReport;

use crate::error::{CliError, CliResult};

/// Network group name of every node.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkLabels {
    groups: Vec<Option<String>>,
}

impl NetworkLabels {
    pub fn uniform(num_nodes: usize, group: &str) -> Self {
        Self {
            groups: vec![Some(group.to_string()); num_nodes],
        }
    }

    /// Parses a `node,group` CSV with a header row and 0-based node
    /// indices. Nodes may be missing; they are reported when used.
    pub fn from_csv(text: &str, origin: &Path) -> CliResult<Self> {
        let bad = |msg: String| CliError::Usage(format!("{}: {msg}", origin.display()));
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let headers = reader.headers().map_err(|e| bad(e.to_string()))?.clone();
        if headers.iter().collect::<Vec<_>>() != ["node", "group"] {
            return Err(bad("expected header `node,group`".into()));
        }
        let mut groups: Vec<Option<String>> = Vec::new();
        for (r, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| bad(format!("row {}: {e}", r + 2)))?;
            let node: usize = rec[0].parse().map_err(|_| bad(format!("row {}: `{}` is not a node index", r + 2, &rec[0])))?;
            let group = rec[1].to_string();
            if group.is_empty() || group == "inter" {
                return Err(bad(format!("row {}: invalid group name `{group}`", r + 2)));
            }
            if node >= groups.len() {
                groups.resize(node + 1, None);
            }
            if groups[node].replace(group).is_some() {
                return Err(bad(format!("node {node} is labelled twice")));
            }
        }
        Ok(Self { groups })
    }

    pub fn group(&self, node: usize) -> Option<&str> {
        self.groups.get(node).and_then(|g| g.as_deref())
    }

    /// The group of both endpoints if they agree, `inter` otherwise.
    pub fn edge_tag(&self, i: usize, j: usize) -> CliResult<&str> {
        let find = |n: usize| {
            self.group(n)
                .ok_or_else(|| CliError::Usage(format!("node {n} has no network label")))
        };
        let (a, b) = (find(i)?, find(j)?);
        Ok(if a == b { a } else { "inter" })
    }
}

/// DOT and CSV renderings of `report`, every edge tagged with its network
/// group or `inter`. Edge weights are the normalized weights.
pub fn emit_connectivity_data(report: &ExplanationReport, labels: &NetworkLabels) -> CliResult<(String, String)> {
    let mut dot = format!("graph {}_group{} {{\n", report.modality, report.group);
    let mut csv = String::from("node_i,node_j,normalized_weight,network\n");
    for e in &report.edges {
        let tag = labels.edge_tag(e.i, e.j)?;
        let _ = writeln!(
            dot,
            "  n{} -- n{} [network=\"{tag}\", weight={:.6}, penwidth={:.3}];",
            e.i,
            e.j,
            e.weight,
            0.5 + 4.5 * e.weight
        );
        let _ = writeln!(csv, "{},{},{:.10},{tag}", e.i, e.j, e.weight);
    }
    dot.push_str("}\n");
    Ok((dot, csv))
}
