//! Photo-likeness scores from a scoring service or a precomputed CSV.
//!
//! The service contract is `POST {endpoint}/score` with `{"image": <base64>}`,
//! answered by `{"p_photo": <float in [0,1]>}`.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;
use std::time::Duration;

use base64::Engine as _;
use serde_json::{json, Value};
use thiserror::Error;

use crate::vqa::ImageData;

#[derive(Debug, Error, PartialEq)]
pub enum StyleError {
    #[error("style csv: {0}")]
    Csv(String),
    #[error("no style score for {0}")]
    Missing(String),
    #[error("p_photo {value} for {image_ref} is outside [0,1]")]
    OutOfRange { image_ref: String, value: f64 },
    #[error("style service transport: {0}")]
    Transport(String),
    #[error("style service returned {code}: {body}")]
    Status { code: u16, body: String },
    #[error("style service response: {0}")]
    BadResponse(String),
}

/// Anything that can score an image. `image_ref` is the caller's name for
/// the image, `image` its bytes.
pub trait StyleSource: Send + Sync {
    fn p_photo(&self, image_ref: &str, image: &ImageData) -> Result<f64, StyleError>;
}

fn check(image_ref: &str, value: f64) -> Result<f64, StyleError> {
    if (0.0..=1.0).contains(&value) {
        Ok(value)
    } else {
        Err(StyleError::OutOfRange {
            image_ref: image_ref.to_string(),
            value,
        })
    }
}

/// `image_ref,p_photo` rows.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StyleTable {
    scores: BTreeMap<String, f64>,
}

impl StyleTable {
    pub fn parse<R: Read>(input: R) -> Result<Self, StyleError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
        let headers = rdr.headers().map_err(|e| StyleError::Csv(e.to_string()))?.clone();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| StyleError::Csv(format!("missing column {name}")))
        };
        let (ri, pi) = (col("image_ref")?, col("p_photo")?);
        let mut scores = BTreeMap::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| StyleError::Csv(e.to_string()))?;
            let image_ref = rec.get(ri).unwrap_or_default().to_string();
            let raw = rec.get(pi).unwrap_or_default();
            let value: f64 = raw
                .parse()
                .map_err(|_| StyleError::Csv(format!("bad p_photo {raw:?} for {image_ref}")))?;
            let value = check(&image_ref, value)?;
            scores.insert(image_ref, value);
        }
        Ok(Self { scores })
    }

    pub fn load(path: &Path) -> Result<Self, StyleError> {
        let file = std::fs::File::open(path).map_err(|e| StyleError::Csv(format!("{}: {e}", path.display())))?;
        Self::parse(file)
    }

    pub fn get(&self, image_ref: &str) -> Option<f64> {
        self.scores.get(image_ref).copied()
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("image_ref,p_photo\n");
        for (k, v) in &self.scores {
            out.push_str(&format!("{k},{v}\n"));
        }
        out
    }
}

impl FromIterator<(String, f64)> for StyleTable {
    fn from_iter<I: IntoIterator<Item = (String, f64)>>(iter: I) -> Self {
        Self {
            scores: iter.into_iter().collect(),
        }
    }
}

impl StyleSource for StyleTable {
    fn p_photo(&self, image_ref: &str, _: &ImageData) -> Result<f64, StyleError> {
        self.get(image_ref).ok_or_else(|| StyleError::Missing(image_ref.to_string()))
    }
}

/// Client for a running scoring service.
pub struct StyleClient {
    url: String,
    agent: ureq::Agent,
}

impl StyleClient {
    pub fn new(endpoint: &str, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            url: format!("{}/score", endpoint.trim_end_matches('/')),
            agent,
        }
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    pub fn request_body(image: &[u8]) -> Value {
        json!({ "image": base64::engine::general_purpose::STANDARD.encode(image) })
    }
}

impl StyleSource for StyleClient {
    fn p_photo(&self, image_ref: &str, image: &ImageData) -> Result<f64, StyleError> {
        let mut resp = self
            .agent
            .post(&self.url)
            .send_json(Self::request_body(&image.bytes))
            .map_err(|e| StyleError::Transport(e.to_string()))?;
        let code = resp.status().as_u16();
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| StyleError::Transport(e.to_string()))?;
        if !(200..300).contains(&code) {
            return Err(StyleError::Status { code, body });
        }
        let v: Value = serde_json::from_str(&body).map_err(|e| StyleError::BadResponse(e.to_string()))?;
        let p = v
            .get("p_photo")
            .and_then(Value::as_f64)
            .ok_or_else(|| StyleError::BadResponse(format!("no numeric p_photo in {body}")))?;
        check(image_ref, p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_lookup_and_range() {
        let t = StyleTable::parse("image_ref,p_photo\na,0.25\nb,1\n".as_bytes()).unwrap();
        let img = ImageData::from_bytes(b"".to_vec());
        assert_eq!(t.p_photo("a", &img), Ok(0.25));
        assert_eq!(t.p_photo("zz", &img), Err(StyleError::Missing("zz".into())));
        assert!(matches!(
            StyleTable::parse("image_ref,p_photo\na,1.5\n".as_bytes()),
            Err(StyleError::OutOfRange { .. })
        ));
        assert!(StyleTable::parse("ref,p\na,0.1\n".as_bytes()).is_err());
        assert_eq!(StyleTable::parse(t.to_csv().as_bytes()).unwrap(), t);
    }

    #[test]
    fn request_shape() {
        assert_eq!(StyleClient::request_body(b"hi"), json!({"image": "aGk="}));
        assert_eq!(StyleClient::new("http://h:1/", Duration::from_secs(1)).url(), "http://h:1/score");
    }
}
