use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MarnError, Result};

/// Ordered ICD→CCS rows as read from a mapping table.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CodeMapping {
    entries: BTreeMap<String, String>,
}

impl CodeMapping {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one row; the same ICD code may repeat only with the same CCS code.
    pub fn insert(&mut self, icd: &str, ccs: &str) -> Result<()> {
        match self.entries.get(icd) {
            Some(existing) if existing != ccs => Err(MarnError::MappingConflict {
                code: icd.to_string(),
                first: existing.clone(),
                second: ccs.to_string(),
            }),
            Some(_) => Ok(()),
            None => {
                self.entries.insert(icd.to_string(), ccs.to_string());
                Ok(())
            }
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, icd: &str) -> Option<&str> {
        self.entries.get(icd).map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(a, b)| (a.as_str(), b.as_str()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut mapping = CodeMapping::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if lineno == 0 && fields.first() == Some(&"icd_code") {
                continue;
            }
            let [icd, ccs] = fields[..] else {
                return Err(MarnError::Format {
                    line: lineno + 1,
                    message: format!("expected `icd_code,ccs_code`, got `{line}`"),
                });
            };
            if icd.is_empty() || ccs.is_empty() {
                return Err(MarnError::Format {
                    line: lineno + 1,
                    message: "empty code".into(),
                });
            }
            mapping.insert(icd, ccs)?;
        }
        Ok(mapping)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("icd_code,ccs_code\n");
        for (icd, ccs) in self.iter() {
            out.push_str(icd);
            out.push(',');
            out.push_str(ccs);
            out.push('\n');
        }
        out
    }
}

pub fn load_code_mapping(path: impl AsRef<Path>) -> Result<CodeMapping> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| MarnError::io(path, e))?;
    CodeMapping::parse(&text)
}

/// The two label spaces and the many-to-one projection between them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSpace {
    icd_codes: Vec<String>,
    ccs_codes: Vec<String>,
    icd_to_ccs: Vec<usize>,
    #[serde(skip)]
    icd_index: HashMap<String, usize>,
    #[serde(skip)]
    ccs_index: HashMap<String, usize>,
}

impl LabelSpace {
    /// Finalizes a mapping into dense indices. Codes are ordered
    /// lexicographically within each branch.
    pub fn from_mapping(mapping: &CodeMapping) -> Result<Self> {
        if mapping.is_empty() {
            return Err(MarnError::Input("code mapping is empty".into()));
        }
        let ccs: BTreeSet<&str> = mapping.iter().map(|(_, c)| c).collect();
        let ccs_codes: Vec<String> = ccs.into_iter().map(String::from).collect();
        let icd_codes: Vec<String> = mapping.iter().map(|(i, _)| i.to_string()).collect();
        let ccs_pos: HashMap<&str, usize> = ccs_codes
            .iter()
            .enumerate()
            .map(|(i, c)| (c.as_str(), i))
            .collect();
        let icd_to_ccs = mapping.iter().map(|(_, c)| ccs_pos[c]).collect();
        Self::from_parts(icd_codes, ccs_codes, icd_to_ccs)
    }

    pub fn from_parts(icd_codes: Vec<String>, ccs_codes: Vec<String>, icd_to_ccs: Vec<usize>) -> Result<Self> {
        if icd_codes.len() != icd_to_ccs.len() {
            return Err(MarnError::Input("icd_to_ccs must cover every ICD code".into()));
        }
        if let Some(&bad) = icd_to_ccs.iter().find(|&&c| c >= ccs_codes.len()) {
            return Err(MarnError::Input(format!("CCS index {bad} out of range")));
        }
        let mut space = LabelSpace {
            icd_codes,
            ccs_codes,
            icd_to_ccs,
            icd_index: HashMap::new(),
            ccs_index: HashMap::new(),
        };
        space.rebuild_index();
        Ok(space)
    }

    /// Restores lookup tables after deserialization.
    pub fn rebuild_index(&mut self) {
        self.icd_index = self.icd_codes.iter().enumerate().map(|(i, c)| (c.clone(), i)).collect();
        self.ccs_index = self.ccs_codes.iter().enumerate().map(|(i, c)| (c.clone(), i)).collect();
    }

    pub fn n_icd(&self) -> usize {
        self.icd_codes.len()
    }

    pub fn n_ccs(&self) -> usize {
        self.ccs_codes.len()
    }

    pub fn icd_codes(&self) -> &[String] {
        &self.icd_codes
    }

    pub fn ccs_codes(&self) -> &[String] {
        &self.ccs_codes
    }

    pub fn ccs_of(&self, icd: usize) -> usize {
        self.icd_to_ccs[icd]
    }

    pub fn icd_to_ccs(&self) -> &[usize] {
        &self.icd_to_ccs
    }

    pub fn icd_index(&self, code: &str) -> Option<usize> {
        self.icd_index.get(code).copied()
    }

    pub fn ccs_index(&self, code: &str) -> Option<usize> {
        self.ccs_index.get(code).copied()
    }

    /// Image of an ICD index set under the projection.
    pub fn derive_ccs_labels(&self, icd: &BTreeSet<usize>) -> Result<BTreeSet<usize>> {
        icd.iter()
            .map(|&i| {
                self.icd_to_ccs
                    .get(i)
                    .copied()
                    .ok_or_else(|| MarnError::MappingGap(format!("#{i}")))
            })
            .collect()
    }

    /// Resolves ICD code strings and derives their CCS set.
    pub fn encode_labels<S: AsRef<str>>(&self, codes: &[S]) -> Result<(BTreeSet<usize>, BTreeSet<usize>)> {
        let icd = codes
            .iter()
            .map(|c| {
                self.icd_index(c.as_ref())
                    .ok_or_else(|| MarnError::MappingGap(c.as_ref().to_string()))
            })
            .collect::<Result<BTreeSet<usize>>>()?;
        let ccs = self.derive_ccs_labels(&icd)?;
        Ok((icd, ccs))
    }
}
