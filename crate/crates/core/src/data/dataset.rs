//! The split file: `{"documents": [...]}` with images stored beside it.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::image::{load_image, save_pgm};
use super::{BBox, Document, Entity, Token};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetFile<D> {
    documents: Vec<D>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DocumentRecord {
    id: String,
    page_width: u32,
    page_height: u32,
    image: String,
    tokens: Vec<TokenRecord>,
    entities: Vec<Entity>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TokenRecord {
    text: String,
    #[serde(rename = "box")]
    bbox: BBox,
}

impl From<&Document> for DocumentRecord {
    fn from(d: &Document) -> Self {
        DocumentRecord {
            id: d.id.clone(),
            page_width: d.page_width,
            page_height: d.page_height,
            image: d.image_path.clone(),
            tokens: d
                .tokens
                .iter()
                .map(|t| TokenRecord {
                    text: t.text.clone(),
                    bbox: t.bbox,
                })
                .collect(),
            entities: d.entities.clone(),
        }
    }
}

/// Pulls the backticked field name out of a serde message.
fn field_of(err: &serde_json::Error) -> String {
    let msg = err.to_string();
    msg.split('`').nth(1).unwrap_or("document").to_string()
}

/// Reads a split file and every image it references, validating each document.
pub fn load_dataset(path: &Path) -> Result<Vec<Document>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: DatasetFile<Value> = serde_json::from_str(&text).map_err(|e| Error::Schema {
        doc: path.display().to_string(),
        field: "documents".into(),
        msg: e.to_string(),
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut docs = Vec::with_capacity(file.documents.len());
    for (n, value) in file.documents.into_iter().enumerate() {
        let label = value
            .get("id")
            .and_then(Value::as_str)
            .map(str::to_string)
            .unwrap_or_else(|| format!("#{n}"));
        let rec: DocumentRecord = serde_json::from_value(value).map_err(|e| Error::Schema {
            doc: label.clone(),
            field: field_of(&e),
            msg: e.to_string(),
        })?;
        let image = load_image(&base.join(&rec.image))?;
        let doc = Document {
            id: rec.id,
            page_width: rec.page_width,
            page_height: rec.page_height,
            tokens: rec
                .tokens
                .into_iter()
                .enumerate()
                .map(|(index, t)| Token {
                    text: t.text,
                    bbox: t.bbox,
                    index,
                })
                .collect(),
            image,
            image_path: rec.image,
            entities: rec.entities,
        };
        doc.validate()?;
        docs.push(doc);
    }
    Ok(docs)
}

/// Writes only the JSON half of a split.
pub fn write_dataset_json(path: &Path, docs: &[Document]) -> Result<()> {
    let file = DatasetFile {
        documents: docs.iter().map(DocumentRecord::from).collect::<Vec<_>>(),
    };
    let mut text = serde_json::to_string_pretty(&file)?;
    text.push('\n');
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes the split file and each document's image at its relative path.
pub fn save_dataset(path: &Path, docs: &[Document]) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new("."));
    for d in docs {
        save_pgm(&d.image, &base.join(&d.image_path))?;
    }
    write_dataset_json(path, docs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::image::encode_pgm;

    fn write(dir: &Path, json: &str) -> std::path::PathBuf {
        let path = dir.join("split.json");
        fs::write(&path, json).unwrap();
        path
    }

    fn one_pixel_image(dir: &Path) {
        let mut bytes = b"P5\n10 10\n255\n".to_vec();
        bytes.extend([255u8; 100]);
        fs::write(dir.join("p.pgm"), bytes).unwrap();
    }

    const ONE_TOKEN: &str = r#"{"documents": [{"id": "a", "page_width": 10, "page_height": 10, "image": "p.pgm",
        "tokens": [{"text": "Name", "box": [1, 1, 5, 4]}], "entities": [{"label": "question", "start": 0, "end": 0}]}]}"#;

    #[test]
    fn minimal_document_parses() {
        let dir = tempfile::tempdir().unwrap();
        one_pixel_image(dir.path());
        let docs = load_dataset(&write(dir.path(), ONE_TOKEN)).unwrap();
        assert_eq!(docs.len(), 1);
        assert_eq!(docs[0].tokens.len(), 1);
        assert_eq!(docs[0].tokens[0].bbox, BBox::new(1, 1, 5, 4));
        assert_eq!(docs[0].image.get(3, 3), 1.0);
    }

    #[test]
    fn schema_errors_name_document_and_field() {
        let dir = tempfile::tempdir().unwrap();
        one_pixel_image(dir.path());
        let json = ONE_TOKEN.replace(r#""box": [1, 1, 5, 4]"#, r#""bbox": [1, 1, 5, 4]"#);
        let err = load_dataset(&write(dir.path(), &json)).unwrap_err();
        match err {
            Error::Schema { doc, field, .. } => {
                assert_eq!(doc, "a");
                assert_eq!(field, "bbox");
            }
            other => panic!("{other}"),
        }
        let json = ONE_TOKEN.replace(r#""start": 0, "end": 0"#, r#""start": 0, "end": 3"#);
        let err = load_dataset(&write(dir.path(), &json)).unwrap_err();
        assert!(err.to_string().contains("entities[0].end"), "{err}");
    }

    #[test]
    fn missing_image_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_dataset(&write(dir.path(), ONE_TOKEN)).unwrap_err();
        assert!(matches!(err, Error::Image { .. }), "{err}");
    }

    #[test]
    fn save_after_load_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        one_pixel_image(dir.path());
        let docs = load_dataset(&write(dir.path(), ONE_TOKEN)).unwrap();
        let out = dir.path().join("out/split.json");
        save_dataset(&out, &docs).unwrap();
        let first = fs::read(&out).unwrap();
        let again = load_dataset(&out).unwrap();
        assert_eq!(again, docs);
        save_dataset(&out, &again).unwrap();
        assert_eq!(fs::read(&out).unwrap(), first);
        assert_eq!(fs::read(dir.path().join("out/p.pgm")).unwrap(), encode_pgm(&docs[0].image));
    }
}
