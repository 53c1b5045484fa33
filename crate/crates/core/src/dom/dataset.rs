use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::labels::check_header;
use super::{
    attach_labels, extract_leaves, parse_dom_dump, DomError, LabelManifest, LabelTable,
    PruneConfig, Webpage, DOM_SCHEMA_VERSION,
};

/// One row of the dataset manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageRecord {
    pub page_id: String,
    pub domain: String,
    pub screenshot_path: PathBuf,
    pub dom_path: PathBuf,
}

/// Dataset manifest CSV `page_id,domain,screenshot_path,dom_path`.
///
/// Relative paths are resolved against `base_dir`, the manifest's directory.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    pub base_dir: PathBuf,
    pub pages: Vec<PageRecord>,
}

impl DatasetManifest {
    pub fn read<R: Read>(reader: R, base_dir: impl Into<PathBuf>) -> Result<Self, DomError> {
        let mut rdr = csv::Reader::from_reader(reader);
        check_header(
            rdr.headers()?,
            &["page_id", "domain", "screenshot_path", "dom_path"],
        )?;
        let mut pages = Vec::new();
        for row in rdr.deserialize() {
            let rec: PageRecord = row?;
            if rec.page_id.is_empty() || rec.domain.is_empty() {
                return Err(DomError::Schema(
                    "empty page_id or domain in dataset manifest".into(),
                ));
            }
            pages.push(rec);
        }
        Ok(DatasetManifest {
            base_dir: base_dir.into(),
            pages,
        })
    }

    pub fn open(path: &Path) -> Result<Self, DomError> {
        let f = std::fs::File::open(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::read(f, base)
    }

    pub fn write<W: Write>(&self, writer: W) -> Result<(), DomError> {
        let mut w = csv::Writer::from_writer(writer);
        for p in &self.pages {
            w.serialize(p)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Distinct domains with their page counts, sorted by name.
    pub fn domain_counts(&self) -> Vec<(String, usize)> {
        let mut m = std::collections::BTreeMap::new();
        for p in &self.pages {
            *m.entry(p.domain.clone()).or_insert(0usize) += 1;
        }
        m.into_iter().collect()
    }

    /// Parses, prunes and labels one page. The screenshot is referenced, not loaded.
    pub fn load_page(
        &self,
        record: &PageRecord,
        labels: Option<&LabelManifest>,
        rules: &PruneConfig,
    ) -> Result<Webpage, DomError> {
        let raw = std::fs::read(self.resolve(&record.dom_path))?;
        let dom = parse_dom_dump(&raw, DOM_SCHEMA_VERSION)?;
        let leaves = extract_leaves(&dom, rules)?;
        let empty = LabelManifest::default();
        let labeled = attach_labels(leaves, labels.unwrap_or(&empty))?;
        Ok(Webpage {
            page_id: record.page_id.clone(),
            domain: record.domain.clone(),
            screenshot_ref: Some(self.resolve(&record.screenshot_path)),
            elements: labeled.elements,
            fully_labeled: labeled.fully_labeled,
            dom: Some(Arc::new(dom)),
        })
    }

    /// Loads every page in manifest order, in parallel. A page without a row
    /// in `labels` loads unlabeled.
    pub fn load_all(
        &self,
        labels: Option<&LabelTable>,
        rules: &PruneConfig,
    ) -> Result<Vec<Webpage>, DomError> {
        self.pages
            .par_iter()
            .map(|r| {
                self.load_page(r, labels.and_then(|t| t.get(&r.page_id)), rules)
                    .map_err(|e| match e {
                        DomError::Schema(m) => DomError::Schema(format!("{}: {m}", r.page_id)),
                        e => e,
                    })
            })
            .collect()
    }

    /// SHA-256 over the manifest rows and every referenced file, in manifest order.
    pub fn content_hash(&self) -> Result<String, DomError> {
        let mut h = Sha256::new();
        for p in &self.pages {
            for field in [&p.page_id, &p.domain] {
                h.update(field.as_bytes());
                h.update([0u8]);
            }
            for path in [&p.screenshot_path, &p.dom_path] {
                let bytes = std::fs::read(self.resolve(path))?;
                h.update((bytes.len() as u64).to_le_bytes());
                h.update(&bytes);
            }
        }
        Ok(hex::encode(h.finalize()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_roundtrip_and_counts() {
        let src = "page_id,domain,screenshot_path,dom_path\na,shop,a.png,a.json\nb,shop,b.png,b.json\nc,mall,c.png,c.json\n";
        let m = DatasetManifest::read(src.as_bytes(), "/data").unwrap();
        assert_eq!(m.pages.len(), 3);
        assert_eq!(m.resolve(Path::new("a.png")), PathBuf::from("/data/a.png"));
        assert_eq!(
            m.domain_counts(),
            vec![("mall".to_string(), 1), ("shop".to_string(), 2)]
        );
        let mut out = Vec::new();
        m.write(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), src);
    }

    #[test]
    fn bad_header_rejected() {
        let src = "id,domain,png,dom\n";
        assert!(DatasetManifest::read(src.as_bytes(), ".").is_err());
    }
}
