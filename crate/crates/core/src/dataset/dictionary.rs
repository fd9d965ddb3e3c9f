use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

/// Dense index <-> name mapping for object categories or predicates.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Dictionary {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum DictionaryFile {
    Wrapped { names: Vec<String> },
    // VRD ships objects.json / predicates.json as a bare list.
    Bare(Vec<String>),
}

impl Dictionary {
    pub fn new<I, S>(names: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        let mut index = HashMap::with_capacity(names.len());
        for (i, n) in names.iter().enumerate() {
            if index.insert(n.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate dictionary name '{n}'")));
            }
        }
        Ok(Dictionary { names, index })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }

    pub fn name_checked(&self, id: usize, what: &'static str) -> Result<&str> {
        self.name(id).ok_or(Error::OutOfBounds {
            what,
            index: id,
            size: self.len(),
        })
    }

    /// Exact match first, then a case-insensitive scan.
    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied().or_else(|| {
            self.names
                .iter()
                .position(|n| n.eq_ignore_ascii_case(name.trim()))
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&DictionaryFile::Wrapped {
            names: self.names.clone(),
        })
        .expect("string list serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: DictionaryFile = serde_json::from_str(text)
            .map_err(|e| Error::Parse(format!("dictionary: {e}")))?;
        match file {
            DictionaryFile::Wrapped { names } | DictionaryFile::Bare(names) => Dictionary::new(names),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_atomic(path, self.to_json().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = io::read_to_string(path)?;
        Dictionary::from_json(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_lookup() {
        let d = Dictionary::new(["person", "traffic light", "bike"]).unwrap();
        let back = Dictionary::from_json(&d.to_json()).unwrap();
        assert_eq!(d, back);
        assert_eq!(d.id("bike"), Some(2));
        assert_eq!(d.id("Person"), Some(0));
        assert_eq!(d.id("car"), None);
        assert_eq!(d.name(1), Some("traffic light"));
        assert!(d.name_checked(3, "object").is_err());
    }

    #[test]
    fn accepts_bare_list() {
        let d = Dictionary::from_json(r#"["on", "under"]"#).unwrap();
        assert_eq!(d.len(), 2);
    }

    #[test]
    fn rejects_duplicates() {
        assert!(Dictionary::new(["a", "a"]).is_err());
        assert!(Dictionary::from_json(r#"{"names": ["x", "x"]}"#).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("objects.json");
        let d = Dictionary::new(["cat", "dog"]).unwrap();
        d.save(&p).unwrap();
        assert_eq!(Dictionary::load(&p).unwrap(), d);
        let missing = Dictionary::load(&dir.path().join("nope.json")).unwrap_err();
        assert!(missing.to_string().contains("nope.json"));
    }
}
