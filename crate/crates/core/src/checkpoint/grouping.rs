use std::collections::BTreeMap;

use regex::{Regex, RegexSet};
use serde::{Deserialize, Serialize};

use super::{matrix_dims, Checkpoint};
use crate::error::{LarvError, Result};

/// Matches the block index in names like `encoder.layers.7.attn.q_proj.weight` or
/// `visual.transformer.resblocks.11.mlp.c_fc.weight`.
pub const DEFAULT_BLOCK_PATTERN: &str =
    r"(?:^|\.)(?:layers|layer|blocks|block|h|resblocks)\.(\d+)\.";

/// Embeddings, positional tables, stem convolutions, final norms and heads. Bare `norm` and
/// `proj` only match outside numbered blocks.
pub const DEFAULT_SKIP_PATTERNS: &[&str] = &[
    r"embed",
    r"positional",
    r"pos_emb",
    r"(?:^|\.)head\.",
    r"lm_head",
    r"classifier",
    r"class_embedding",
    r"(?:^|\.)cls",
    r"(?:^|\.)conv1\.",
    r"(?:^|\.)ln_pre\.",
    r"(?:^|\.)ln_post\.",
    r"(?:^|\.)ln_final\.",
    r"(?:^|\.)ln_f\.",
    r"(?:^|\.)final_norm\.",
    r"^(?:[A-Za-z_]+\.)*norm\.(?:weight|bias)$",
    r"^(?:[A-Za-z_]+\.)*proj$",
    r"projection$",
    r"logit_scale",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroupingPolicy {
    /// Parameters sharing a captured block index form one group.
    #[default]
    Pattern,
    /// Every tensor with two or more axes is its own group; 1-axis tensors ride along with
    /// the preceding group.
    Flat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroupingConfig {
    pub policy: GroupingPolicy,
    /// Regex with exactly one capture group holding the integer block index.
    pub block_pattern: String,
    /// Regexes for parameters left out of scoring (they compose with scale 1.0).
    pub skip: Vec<String>,
}

impl Default for GroupingConfig {
    fn default() -> Self {
        Self {
            policy: GroupingPolicy::Pattern,
            block_pattern: DEFAULT_BLOCK_PATTERN.to_string(),
            skip: DEFAULT_SKIP_PATTERNS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl GroupingConfig {
    pub fn flat() -> Self {
        Self {
            policy: GroupingPolicy::Flat,
            ..Self::default()
        }
    }
}

/// A 2-D view of one parameter: the leading axis against the folded trailing axes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatrixView {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

/// One scoring unit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerGroup {
    /// 1-based position in the partition.
    pub index: usize,
    pub total: usize,
    pub matrix_views: Vec<MatrixView>,
    /// Parameters composed with the group's scale but not scored.
    pub passenger_names: Vec<String>,
}

impl LayerGroup {
    pub fn member_names(&self) -> impl Iterator<Item = &str> {
        self.matrix_views
            .iter()
            .map(|v| v.name.as_str())
            .chain(self.passenger_names.iter().map(String::as_str))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerPartition {
    pub groups: Vec<LayerGroup>,
    /// Parameters matched by the skip-list, in checkpoint order.
    pub skipped: Vec<String>,
}

impl LayerPartition {
    pub fn num_layers(&self) -> usize {
        self.groups.len()
    }

    /// Group position (0-based) for every grouped parameter.
    pub fn group_of(&self) -> BTreeMap<&str, usize> {
        self.groups
            .iter()
            .enumerate()
            .flat_map(|(i, g)| g.member_names().map(move |n| (n, i)))
            .collect()
    }
}

#[derive(Default)]
struct Pending {
    views: Vec<MatrixView>,
    passengers: Vec<String>,
}

pub fn group_layers(ckpt: &Checkpoint, config: &GroupingConfig) -> Result<LayerPartition> {
    let skip = RegexSet::new(&config.skip)
        .map_err(|e| LarvError::InvalidConfig(format!("bad skip pattern: {e}")))?;

    let mut skipped = Vec::new();
    let mut pending: Vec<Pending> = Vec::new();

    match config.policy {
        GroupingPolicy::Pattern => {
            let block = Regex::new(&config.block_pattern)
                .map_err(|e| LarvError::InvalidConfig(format!("bad block pattern: {e}")))?;
            if block.captures_len() != 2 {
                return Err(LarvError::InvalidConfig(format!(
                    "block pattern `{}` must have exactly one capture group",
                    config.block_pattern
                )));
            }
            let mut by_block: BTreeMap<u64, Pending> = BTreeMap::new();
            for (name, tensor) in &ckpt.tensors {
                if skip.is_match(name) {
                    skipped.push(name.clone());
                    continue;
                }
                let idx = block
                    .captures(name)
                    .and_then(|c| c.get(1))
                    .and_then(|m| m.as_str().parse::<u64>().ok())
                    .ok_or_else(|| LarvError::UngroupedParameter(name.clone()))?;
                let slot = by_block.entry(idx).or_default();
                match matrix_dims(tensor.shape()) {
                    Some((rows, cols)) => slot.views.push(MatrixView {
                        name: name.clone(),
                        rows,
                        cols,
                    }),
                    None => slot.passengers.push(name.clone()),
                }
            }
            pending.extend(by_block.into_values());
        }
        GroupingPolicy::Flat => {
            let mut leading = Vec::new();
            for (name, tensor) in &ckpt.tensors {
                if skip.is_match(name) {
                    skipped.push(name.clone());
                    continue;
                }
                match matrix_dims(tensor.shape()) {
                    Some((rows, cols)) => pending.push(Pending {
                        views: vec![MatrixView {
                            name: name.clone(),
                            rows,
                            cols,
                        }],
                        passengers: Vec::new(),
                    }),
                    None => match pending.last_mut() {
                        Some(p) => p.passengers.push(name.clone()),
                        None => leading.push(name.clone()),
                    },
                }
            }
            // 1-axis tensors ahead of the first matrix have no predecessor; they join the
            // first group instead.
            match pending.first_mut() {
                Some(first) => {
                    leading.append(&mut first.passengers);
                    first.passengers = leading;
                }
                None if !leading.is_empty() => {
                    return Err(LarvError::GroupWithoutMatrices { index: 1 })
                }
                None => {}
            }
        }
    }

    if pending.is_empty() {
        return Err(LarvError::EmptyPartition);
    }
    let total = pending.len();
    let groups = pending
        .into_iter()
        .enumerate()
        .map(|(i, p)| {
            if p.views.is_empty() {
                return Err(LarvError::GroupWithoutMatrices { index: i + 1 });
            }
            Ok(LayerGroup {
                index: i + 1,
                total,
                matrix_views: p.views,
                passenger_names: p.passengers,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LayerPartition { groups, skipped })
}
