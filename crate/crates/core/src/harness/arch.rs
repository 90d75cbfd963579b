//! Hidden-layer architecture strings such as `"1500, 1000, 500"` or
//! `"9 x 1000"` (nine layers of 1000 units). Tokens are comma-separated and
//! each is either a size or a `count x size` repetition.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ArchError {
    #[error("architecture string is empty")]
    EmptyArch,
    #[error("cannot parse architecture token {0:?}")]
    BadToken(String),
    #[error("architecture token {0:?} has a zero size or count")]
    ZeroSize(String),
}

fn parse_positive(raw: &str, token: &str) -> Result<usize, ArchError> {
    let value: usize = raw
        .trim()
        .parse()
        .map_err(|_| ArchError::BadToken(token.to_string()))?;
    if value == 0 {
        return Err(ArchError::ZeroSize(token.to_string()));
    }
    Ok(value)
}

/// Hidden sizes only; input and output widths are added by the pipeline.
pub fn parse_arch(s: &str) -> Result<Vec<usize>, ArchError> {
    if s.trim().is_empty() {
        return Err(ArchError::EmptyArch);
    }
    let mut sizes = Vec::new();
    for token in s.split(',') {
        let token = token.trim();
        if token.is_empty() {
            return Err(ArchError::BadToken(token.to_string()));
        }
        match token.split_once(['x', 'X', '×']) {
            Some((count, size)) => {
                let count = parse_positive(count, token)?;
                let size = parse_positive(size, token)?;
                sizes.extend(std::iter::repeat_n(size, count));
            }
            None => sizes.push(parse_positive(token, token)?),
        }
    }
    Ok(sizes)
}

/// Canonical form: sizes joined by `", "`.
pub fn format_arch(sizes: &[usize]) -> String {
    sizes
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join(", ")
}
