//! Axis regrouping in the einops notation, restricted to merging and
//! splitting adjacent axes (`b t n c -> (b t) n c`). Axis order may not
//! change, so every pattern is a pure reshape of the row-major buffer.

use std::collections::HashMap;

use super::Tensor;
use crate::error::{dim_err, Result};

type Groups = Vec<Vec<String>>;

fn parse_side(side: &str) -> Result<Groups> {
    let mut groups = Vec::new();
    let mut current: Option<Vec<String>> = None;
    let spaced = side.replace('(', " ( ").replace(')', " ) ");
    for tok in spaced.split_whitespace() {
        match tok {
            "(" => {
                if current.is_some() {
                    return dim_err(format!("nested parentheses in pattern side '{side}'"));
                }
                current = Some(Vec::new());
            }
            ")" => match current.take() {
                Some(g) if !g.is_empty() => groups.push(g),
                _ => return dim_err(format!("unbalanced or empty group in '{side}'")),
            },
            name => match current.as_mut() {
                Some(g) => g.push(name.to_string()),
                None => groups.push(vec![name.to_string()]),
            },
        }
    }
    if current.is_some() {
        return dim_err(format!("unclosed group in '{side}'"));
    }
    Ok(groups)
}

impl Tensor {
    /// Regroups axes according to `pattern`. Extents of axes that are split
    /// out of a merged input axis come from `sizes`.
    pub fn rearrange(&self, pattern: &str, sizes: &[(&str, usize)]) -> Result<Tensor> {
        let Some((lhs, rhs)) = pattern.split_once("->") else {
            return dim_err(format!("pattern '{pattern}' lacks '->'"));
        };
        let (lhs, rhs) = (parse_side(lhs)?, parse_side(rhs)?);
        let flat_l: Vec<&String> = lhs.iter().flatten().collect();
        let flat_r: Vec<&String> = rhs.iter().flatten().collect();
        if flat_l != flat_r {
            return dim_err(format!(
                "pattern '{pattern}' reorders or drops axes; only regrouping is supported"
            ));
        }
        if lhs.len() != self.rank() {
            return dim_err(format!(
                "pattern '{pattern}' expects rank {}, tensor has shape {:?}",
                lhs.len(),
                self.shape()
            ));
        }
        let mut known: HashMap<&str, usize> = sizes.iter().copied().collect();
        for (group, &extent) in lhs.iter().zip(self.shape()) {
            let unknown: Vec<&String> =
                group.iter().filter(|n| !known.contains_key(n.as_str())).collect();
            let known_prod: usize = group
                .iter()
                .filter_map(|n| known.get(n.as_str()))
                .product();
            match unknown.as_slice() {
                [] => {
                    if known_prod != extent {
                        return dim_err(format!(
                            "axis group {group:?} has extent {extent}, pattern implies {known_prod}"
                        ));
                    }
                }
                [one] => {
                    if known_prod == 0 || extent % known_prod != 0 {
                        return dim_err(format!(
                            "axis group {group:?} of extent {extent} not divisible by {known_prod}"
                        ));
                    }
                    known.insert(one.as_str(), extent / known_prod);
                }
                _ => {
                    return dim_err(format!(
                        "axis group {group:?} has more than one unknown extent"
                    ))
                }
            }
        }
        let shape: Vec<usize> = rhs
            .iter()
            .map(|g| g.iter().map(|n| known[n.as_str()]).product())
            .collect();
        self.reshape(&shape)
    }
}
