//! Expert folding: adapt a grouter from E_S source experts to E_T target
//! experts by merging co-activated experts and folding the score layer
//! columns through a binary mapping matrix.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::routing::RoutingDecision;

/// Symmetric co-activation counts between source experts; diagonal is 0.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix {
    pub num_experts: usize,
    /// Row-major `[E_S][E_S]`.
    pub counts: Vec<u64>,
}

impl AffinityMatrix {
    pub fn at(&self, i: usize, j: usize) -> u64 {
        self.counts[i * self.num_experts + j]
    }
}

/// Binary source-to-target map: row i has a single 1 in the column of the
/// group that source expert i was merged into.
#[derive(Debug, Clone, PartialEq)]
pub struct MappingMatrix {
    pub source_experts: usize,
    pub target_experts: usize,
    /// `assignment[i]` = target column of source expert i.
    pub assignment: Vec<usize>,
}

impl MappingMatrix {
    pub fn from_groups(groups: &[Vec<usize>], source_experts: usize) -> Result<Self> {
        let mut assignment = vec![usize::MAX; source_experts];
        for (t, group) in groups.iter().enumerate() {
            for &s in group {
                if s >= source_experts {
                    return Err(Error::IndexOutOfRange {
                        what: "source expert",
                        index: s,
                        bound: source_experts,
                    });
                }
                if assignment[s] != usize::MAX {
                    return Err(Error::InvalidValue(
                        "mapping",
                        format!("source expert {s} mapped twice"),
                    ));
                }
                assignment[s] = t;
            }
        }
        if let Some(missing) = assignment.iter().position(|&a| a == usize::MAX) {
            return Err(Error::InvalidValue(
                "mapping",
                format!("source expert {missing} unmapped"),
            ));
        }
        Ok(Self {
            source_experts,
            target_experts: groups.len(),
            assignment,
        })
    }

    /// Dense 0/1 matrix `[E_S][E_T]`, row-major.
    pub fn dense(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.source_experts * self.target_experts];
        for (i, &t) in self.assignment.iter().enumerate() {
            m[i * self.target_experts + t] = 1.0;
        }
        m
    }

    /// Two-column text persistence: `source_expert<TAB>target_expert`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "# source_expert\ttarget_expert\t({}->{})", self.source_experts, self.target_experts)?;
        for (i, &t) in self.assignment.iter().enumerate() {
            writeln!(f, "{i}\t{t}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut pairs = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut it = line.split_whitespace();
            let (s, t) = match (it.next(), it.next()) {
                (Some(s), Some(t)) => (s, t),
                _ => {
                    return Err(Error::Format {
                        what: "mapping file",
                        detail: format!("bad line `{line}`"),
                    })
                }
            };
            let s: usize = s.parse().map_err(|_| Error::Format {
                what: "mapping file",
                detail: format!("bad source index `{s}`"),
            })?;
            let t: usize = t.parse().map_err(|_| Error::Format {
                what: "mapping file",
                detail: format!("bad target index `{t}`"),
            })?;
            pairs.push((s, t));
        }
        let source_experts = pairs.iter().map(|&(s, _)| s + 1).max().unwrap_or(0);
        let target_experts = pairs.iter().map(|&(_, t)| t + 1).max().unwrap_or(0);
        let mut assignment = vec![usize::MAX; source_experts];
        for (s, t) in pairs {
            assignment[s] = t;
        }
        if assignment.iter().any(|&a| a == usize::MAX) {
            return Err(Error::Format {
                what: "mapping file",
                detail: "incomplete mapping".into(),
            });
        }
        Ok(Self {
            source_experts,
            target_experts,
            assignment,
        })
    }
}

/// Counts, for every unordered expert pair, the tokens whose decision
/// activates both.
pub fn coactivation_matrix(decisions: &[RoutingDecision], num_experts: usize) -> Result<AffinityMatrix> {
    let mut counts = vec![0u64; num_experts * num_experts];
    for d in decisions {
        for (a, &ea) in d.experts.iter().enumerate() {
            let ea = ea as usize;
            if ea >= num_experts {
                return Err(Error::IndexOutOfRange {
                    what: "expert index",
                    index: ea,
                    bound: num_experts,
                });
            }
            for &eb in &d.experts[a + 1..] {
                let eb = eb as usize;
                counts[ea * num_experts + eb] += 1;
                counts[eb * num_experts + ea] += 1;
            }
        }
    }
    Ok(AffinityMatrix {
        num_experts,
        counts,
    })
}

/// Group sizes for folding E_S into E_T: `E_S mod E_T` groups get one extra
/// member; larger groups come first.
pub fn group_sizes(source_experts: usize, target_experts: usize) -> Result<Vec<usize>> {
    if target_experts == 0 || source_experts < target_experts {
        return Err(Error::InvalidConfig(format!(
            "cannot fold {source_experts} experts into {target_experts}"
        )));
    }
    let base = source_experts / target_experts;
    let extra = source_experts % target_experts;
    Ok((0..target_experts)
        .map(|i| if i < extra { base + 1 } else { base })
        .collect())
}

/// Greedy affinity merging: each group is seeded with the lowest-index
/// unassigned expert and repeatedly extended with the unassigned expert of
/// maximal summed affinity to the current members (ties to the lower index).
pub fn greedy_merge(affinity: &AffinityMatrix, sizes: &[usize]) -> Result<Vec<Vec<usize>>> {
    let e = affinity.num_experts;
    if sizes.iter().sum::<usize>() != e {
        return Err(Error::InvalidConfig(format!(
            "group sizes sum {} != {e}",
            sizes.iter().sum::<usize>()
        )));
    }
    let mut assigned = vec![false; e];
    let mut groups = Vec::with_capacity(sizes.len());
    for &size in sizes {
        let seed = (0..e)
            .find(|&i| !assigned[i])
            .expect("sizes sum to expert count");
        assigned[seed] = true;
        let mut group = vec![seed];
        while group.len() < size {
            let mut best: Option<(u64, usize)> = None;
            for j in 0..e {
                if assigned[j] {
                    continue;
                }
                let score: u64 = group.iter().map(|&m| affinity.at(m, j)).sum();
                let better = match best {
                    None => true,
                    Some((bs, bj)) => score > bs || (score == bs && j < bj),
                };
                if better {
                    best = Some((score, j));
                }
            }
            let (_, pick) = best.expect("sizes sum to expert count");
            assigned[pick] = true;
            group.push(pick);
        }
        groups.push(group);
    }
    Ok(groups)
}

/// `mapping_matrix` over greedy groups: row i gets its 1 in i's group column.
pub fn mapping_matrix(groups: &[Vec<usize>]) -> Result<MappingMatrix> {
    let source_experts = groups.iter().map(|g| g.len()).sum();
    MappingMatrix::from_groups(groups, source_experts)
}

/// Folds the score layer: `W~ = W M`, so target column j is the exact sum of
/// its group's source columns. `w` is `[d][E_S]` row-major.
pub fn fold_weights(w: &[f64], d: usize, mapping: &MappingMatrix) -> Result<Vec<f64>> {
    let es = mapping.source_experts;
    let et = mapping.target_experts;
    if w.len() != d * es {
        return Err(Error::ShapeMismatch {
            op: "fold-weights",
            lhs: vec![d, es],
            rhs: vec![w.len()],
        });
    }
    let mut out = vec![0.0; d * et];
    for row in 0..d {
        for (s, &t) in mapping.assignment.iter().enumerate() {
            out[row * et + t] += w[row * es + s];
        }
    }
    Ok(out)
}

/// Convenience: affinity counting + sizing + greedy merge + mapping.
pub fn fold_plan(
    decisions: &[RoutingDecision],
    source_experts: usize,
    target_experts: usize,
) -> Result<(AffinityMatrix, Vec<Vec<usize>>, MappingMatrix)> {
    let affinity = coactivation_matrix(decisions, source_experts)?;
    let sizes = group_sizes(source_experts, target_experts)?;
    let groups = greedy_merge(&affinity, &sizes)?;
    let mapping = mapping_matrix(&groups)?;
    Ok((affinity, groups, mapping))
}
