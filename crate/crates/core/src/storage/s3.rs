use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::sigv4::{self, CanonicalRequest, Credentials};
use super::{ByteRange, ObjectInfo, ObjectPath, ObjectStore, StoreError, UploadSink};

/// Connection settings for an S3-compatible endpoint (path-style addressing).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct S3Config {
    /// Base URL such as `http://127.0.0.1:9000`.
    pub endpoint: String,
    #[serde(default = "default_region")]
    pub region: String,
    #[serde(default)]
    pub access_key: String,
    #[serde(default)]
    pub secret_key: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
}

fn default_region() -> String {
    "us-east-1".into()
}

fn default_timeout_ms() -> u64 {
    30_000
}

/// Client for an S3-compatible object API.
#[derive(Debug, Clone)]
pub struct S3Store {
    cfg: S3Config,
    base: String,
    host: String,
    creds: Credentials,
    agent: ureq::Agent,
}

struct Reply {
    status: u16,
    headers: Vec<(String, String)>,
    body: Vec<u8>,
}

impl Reply {
    fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }

    fn text(&self) -> String {
        String::from_utf8_lossy(&self.body).into_owned()
    }
}

#[derive(Deserialize)]
#[serde(rename_all = "PascalCase")]
struct ListBucketResult {
    #[serde(default)]
    contents: Vec<ListEntry>,
    #[serde(default)]
    is_truncated: bool,
    #[serde(default)]
    next_continuation_token: Option<String>,
}

#[derive(Deserialize)]
#[serde(rename_all = "PascalCase")]
struct ListEntry {
    key: String,
    size: u64,
}

#[derive(Deserialize)]
#[serde(rename_all = "PascalCase")]
struct InitiateMultipartUploadResult {
    upload_id: String,
}

#[derive(Serialize)]
#[serde(rename = "CompleteMultipartUpload")]
struct CompleteMultipartUpload {
    #[serde(rename = "Part")]
    parts: Vec<CompletedPart>,
}

#[derive(Serialize)]
#[serde(rename_all = "PascalCase")]
struct CompletedPart {
    part_number: u32,
    #[serde(rename = "ETag")]
    etag: String,
}

impl S3Store {
    pub fn new(cfg: S3Config) -> Result<Self, StoreError> {
        let base = cfg.endpoint.trim_end_matches('/').to_string();
        let host = base
            .split_once("://")
            .map(|(_, rest)| rest)
            .ok_or_else(|| StoreError::StoreUnavailable(format!("endpoint `{base}` has no scheme")))?
            .split('/')
            .next()
            .unwrap_or_default()
            .to_string();
        if host.is_empty() {
            return Err(StoreError::StoreUnavailable(format!("endpoint `{base}` has no host")));
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_millis(cfg.timeout_ms)))
            .build()
            .into();
        Ok(S3Store {
            creds: Credentials {
                access_key: cfg.access_key.clone(),
                secret_key: cfg.secret_key.clone(),
            },
            cfg,
            base,
            host,
            agent,
        })
    }

    fn request(
        &self,
        method: &str,
        path: &str,
        query: &[(&str, &str)],
        extra_headers: &[(&str, &str)],
        body: Option<&[u8]>,
    ) -> Result<Reply, StoreError> {
        let amz_date = chrono::Utc::now().format("%Y%m%dT%H%M%SZ").to_string();
        let payload_hash = match body {
            Some(b) => sigv4::sha256_hex(b),
            None => sigv4::EMPTY_PAYLOAD_SHA256.to_string(),
        };
        let mut headers: Vec<(&str, &str)> = vec![
            ("host", &self.host),
            ("x-amz-content-sha256", &payload_hash),
            ("x-amz-date", &amz_date),
        ];
        headers.extend_from_slice(extra_headers);
        let auth = sigv4::authorization(
            &self.creds,
            &self.cfg.region,
            "s3",
            &amz_date,
            &CanonicalRequest {
                method,
                path,
                query,
                headers: &headers,
                payload_sha256: &payload_hash,
            },
        );
        let canonical_query = CanonicalRequest {
            method,
            path,
            query,
            headers: &[],
            payload_sha256: "",
        }
        .canonical_query();
        let mut url = format!("{}{}", self.base, sigv4::uri_encode(path, true));
        if !canonical_query.is_empty() {
            url.push('?');
            url.push_str(&canonical_query);
        }
        let mut builder = ureq::http::Request::builder().method(method).uri(&url);
        for (k, v) in headers.iter().filter(|(k, _)| *k != "host") {
            builder = builder.header(*k, *v);
        }
        builder = builder.header("authorization", auth);
        let result = match body {
            Some(b) => {
                let req = builder
                    .body(b.to_vec())
                    .map_err(|e| StoreError::StoreUnavailable(e.to_string()))?;
                self.agent.run(req)
            }
            None => {
                let req = builder
                    .body(())
                    .map_err(|e| StoreError::StoreUnavailable(e.to_string()))?;
                self.agent.run(req)
            }
        };
        let mut resp = result.map_err(|e| StoreError::StoreUnavailable(format!("{method} {url}: {e}")))?;
        let status = resp.status().as_u16();
        let headers = resp
            .headers()
            .iter()
            .map(|(k, v)| (k.as_str().to_string(), v.to_str().unwrap_or_default().to_string()))
            .collect();
        let body = if method == "HEAD" {
            Vec::new()
        } else {
            resp.body_mut()
                .with_config()
                .limit(u64::MAX)
                .read_to_vec()
                .map_err(|e| StoreError::StoreUnavailable(format!("reading {url}: {e}")))?
        };
        Ok(Reply {
            status,
            headers,
            body,
        })
    }

    fn object_url_path(path: &ObjectPath) -> String {
        format!("/{}/{}", path.bucket(), path.key())
    }

    fn error_for(path: &dyn std::fmt::Display, reply: &Reply) -> StoreError {
        match reply.status {
            404 => StoreError::NoSuchObject(path.to_string()),
            401 | 403 => StoreError::AccessDenied(format!("{path}: {}", reply.text())),
            s => StoreError::StoreUnavailable(format!("{path}: HTTP {s}: {}", reply.text())),
        }
    }
}

fn parse_xml<T: for<'de> Deserialize<'de>>(body: &[u8], what: &str) -> Result<T, StoreError> {
    let text = std::str::from_utf8(body)
        .map_err(|_| StoreError::StoreUnavailable(format!("{what}: response is not UTF-8")))?;
    quick_xml::de::from_str(text)
        .map_err(|e| StoreError::StoreUnavailable(format!("{what}: unparseable response: {e}")))
}

impl ObjectStore for S3Store {
    fn put_object(&self, path: &ObjectPath, payload: &[u8]) -> Result<(), StoreError> {
        let reply = self.request("PUT", &Self::object_url_path(path), &[], &[], Some(payload))?;
        match reply.status {
            200..=299 => Ok(()),
            _ => Err(Self::error_for(path, &reply)),
        }
    }

    fn get_object_range(&self, path: &ObjectPath, range: ByteRange) -> Result<Vec<u8>, StoreError> {
        let header = format!("bytes={}-{}", range.start(), range.end() - 1);
        let reply = self.request(
            "GET",
            &Self::object_url_path(path),
            &[],
            &[("range", &header)],
            None,
        )?;
        match reply.status {
            206 => Ok(reply.body),
            // Servers that ignore Range send the whole object.
            200 => {
                let size = reply.body.len() as u64;
                if range.start() >= size {
                    return Err(StoreError::InvalidRange {
                        path: path.to_string(),
                        start: range.start(),
                        end: range.end(),
                        size,
                    });
                }
                Ok(reply.body[range.start() as usize..range.end().min(size) as usize].to_vec())
            }
            416 => {
                let size = self.object_size(path)?;
                Err(StoreError::InvalidRange {
                    path: path.to_string(),
                    start: range.start(),
                    end: range.end(),
                    size,
                })
            }
            _ => Err(Self::error_for(path, &reply)),
        }
    }

    fn list_objects(&self, bucket: &str, prefix: &str) -> Result<Vec<ObjectInfo>, StoreError> {
        let mut out = Vec::new();
        let mut token: Option<String> = None;
        loop {
            let mut query = vec![("list-type", "2"), ("prefix", prefix)];
            if let Some(t) = &token {
                query.push(("continuation-token", t));
            }
            let reply = self.request("GET", &format!("/{bucket}"), &query, &[], None)?;
            match reply.status {
                200 => {}
                404 => return Ok(Vec::new()),
                _ => return Err(Self::error_for(&format!("{bucket}/{prefix}"), &reply)),
            }
            let page: ListBucketResult = parse_xml(&reply.body, "list")?;
            for entry in page.contents {
                out.push(ObjectInfo {
                    path: ObjectPath::new(bucket, entry.key)?,
                    size: entry.size,
                });
            }
            match (page.is_truncated, page.next_continuation_token) {
                (true, Some(t)) => token = Some(t),
                _ => break,
            }
        }
        out.sort_by(|a, b| a.path.key().as_bytes().cmp(b.path.key().as_bytes()));
        Ok(out)
    }

    fn object_size(&self, path: &ObjectPath) -> Result<u64, StoreError> {
        let reply = self.request("HEAD", &Self::object_url_path(path), &[], &[], None)?;
        match reply.status {
            200 => reply
                .header("content-length")
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| StoreError::StoreUnavailable(format!("{path}: missing Content-Length"))),
            _ => Err(Self::error_for(path, &reply)),
        }
    }

    fn delete_object(&self, path: &ObjectPath) -> Result<(), StoreError> {
        let reply = self.request("DELETE", &Self::object_url_path(path), &[], &[], None)?;
        match reply.status {
            200..=299 | 404 => Ok(()),
            _ => Err(Self::error_for(path, &reply)),
        }
    }

    fn start_upload(&self, path: &ObjectPath) -> Result<Box<dyn UploadSink>, StoreError> {
        let reply = self.request(
            "POST",
            &Self::object_url_path(path),
            &[("uploads", "")],
            &[],
            Some(b""),
        )?;
        if reply.status != 200 {
            return Err(Self::error_for(path, &reply));
        }
        let init: InitiateMultipartUploadResult = parse_xml(&reply.body, "initiate upload")?;
        Ok(Box::new(S3Upload {
            store: self.clone(),
            path: path.clone(),
            upload_id: init.upload_id,
            parts: Vec::new(),
        }))
    }
}

struct S3Upload {
    store: S3Store,
    path: ObjectPath,
    upload_id: String,
    parts: Vec<CompletedPart>,
}

impl UploadSink for S3Upload {
    fn put_part(&mut self, part_number: u32, bytes: &[u8]) -> Result<(), StoreError> {
        let n = part_number.to_string();
        let reply = self.store.request(
            "PUT",
            &S3Store::object_url_path(&self.path),
            &[("partNumber", &n), ("uploadId", &self.upload_id)],
            &[],
            Some(bytes),
        )?;
        if reply.status != 200 {
            return Err(S3Store::error_for(&self.path, &reply));
        }
        let etag = reply
            .header("etag")
            .ok_or_else(|| StoreError::StoreUnavailable(format!("{}: part without ETag", self.path)))?
            .to_string();
        self.parts.push(CompletedPart {
            part_number,
            etag,
        });
        Ok(())
    }

    fn complete(self: Box<Self>) -> Result<(), StoreError> {
        if self.parts.is_empty() {
            // S3 rejects zero-part completions; commit an empty object instead.
            let store = self.store.clone();
            let path = self.path.clone();
            self.abort()?;
            return store.put_object(&path, b"");
        }
        let body = quick_xml::se::to_string(&CompleteMultipartUpload {
            parts: self.parts,
        })
        .map_err(|e| StoreError::StoreUnavailable(e.to_string()))?;
        let reply = self.store.request(
            "POST",
            &S3Store::object_url_path(&self.path),
            &[("uploadId", &self.upload_id)],
            &[],
            Some(body.as_bytes()),
        )?;
        // A 200 can still carry an <Error> document.
        if reply.status != 200 || reply.text().contains("<Error>") {
            return Err(S3Store::error_for(&self.path, &reply));
        }
        Ok(())
    }

    fn abort(self: Box<Self>) -> Result<(), StoreError> {
        let reply = self.store.request(
            "DELETE",
            &S3Store::object_url_path(&self.path),
            &[("uploadId", &self.upload_id)],
            &[],
            None,
        )?;
        match reply.status {
            200..=299 | 404 => Ok(()),
            _ => Err(S3Store::error_for(&self.path, &reply)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unreachable_endpoint_is_unavailable() {
        let store = S3Store::new(S3Config {
            endpoint: "http://127.0.0.1:1".into(),
            region: default_region(),
            access_key: "k".into(),
            secret_key: "s".into(),
            timeout_ms: 2000,
        })
        .unwrap();
        let p = ObjectPath::new("b", "x").unwrap();
        assert!(matches!(store.put_object(&p, b"abc"), Err(StoreError::StoreUnavailable(_))));
    }

    #[test]
    fn endpoint_requires_scheme() {
        let cfg = S3Config {
            endpoint: "localhost:9000".into(),
            region: default_region(),
            access_key: String::new(),
            secret_key: String::new(),
            timeout_ms: 1000,
        };
        assert!(S3Store::new(cfg).is_err());
    }

    #[test]
    fn list_response_parses() {
        let xml = br#"<?xml version="1.0" encoding="UTF-8"?>
<ListBucketResult xmlns="http://s3.amazonaws.com/doc/2006-03-01/">
  <Name>b</Name><Prefix>a/</Prefix><KeyCount>2</KeyCount><IsTruncated>true</IsTruncated>
  <NextContinuationToken>tok</NextContinuationToken>
  <Contents><Key>a/1</Key><Size>3</Size><ETag>"x"</ETag></Contents>
  <Contents><Key>a/&amp;2</Key><Size>0</Size></Contents>
</ListBucketResult>"#;
        let page: ListBucketResult = parse_xml(xml, "t").unwrap();
        assert!(page.is_truncated);
        assert_eq!(page.next_continuation_token.as_deref(), Some("tok"));
        assert_eq!(page.contents[1].key, "a/&2");
        assert_eq!(page.contents[0].size, 3);
    }

    #[test]
    fn complete_body_shape() {
        let body = quick_xml::se::to_string(&CompleteMultipartUpload {
            parts: vec![CompletedPart {
                part_number: 1,
                etag: "\"e1\"".into(),
            }],
        })
        .unwrap();
        assert!(body.starts_with("<CompleteMultipartUpload><Part><PartNumber>1</PartNumber><ETag>"));
    }
}
