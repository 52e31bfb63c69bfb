//! An in-memory S3-compatible endpoint with path-style addressing.
//!
//! Serves PUT, ranged GET, HEAD, DELETE, ListObjectsV2 with continuation
//! tokens, and multipart uploads. Every request's SigV4 signature is
//! recomputed and checked against the configured credentials.

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;

use axum::Router;
use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, Method, StatusCode, header};
use axum::response::{IntoResponse, Response};
use axum::routing::any;
use spillway_core::storage::S3Config;
use spillway_core::storage::sigv4::{self, CanonicalRequest, Credentials};
use tokio::sync::oneshot;

pub const ACCESS_KEY: &str = "fake-access";
pub const SECRET_KEY: &str = "fake-secret";
pub const REGION: &str = "us-east-1";

struct Upload {
    bucket: String,
    key: String,
    parts: BTreeMap<u32, Vec<u8>>,
}

struct Inner {
    objects: Mutex<BTreeMap<(String, String), Vec<u8>>>,
    uploads: Mutex<HashMap<String, Upload>>,
    next_upload: AtomicU64,
    page_size: usize,
    min_part_bytes: u64,
    available: AtomicBool,
    requests: AtomicU64,
}

type Shared = Arc<Inner>;

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn error(status: StatusCode, code: &str) -> Response {
    let body = format!("<?xml version=\"1.0\" encoding=\"UTF-8\"?><Error><Code>{code}</Code></Error>");
    (status, [(header::CONTENT_TYPE, "application/xml")], body).into_response()
}

fn xml(body: String) -> Response {
    (StatusCode::OK, [(header::CONTENT_TYPE, "application/xml")], body).into_response()
}

/// Recomputes the signature the client should have sent.
fn check_signature(
    method: &Method,
    path: &str,
    query: &[(String, String)],
    headers: &HeaderMap,
    body: &[u8],
) -> Result<(), Response> {
    let denied = || error(StatusCode::FORBIDDEN, "SignatureDoesNotMatch");
    let get = |name: &str| headers.get(name).and_then(|v| v.to_str().ok());
    let auth = get("authorization").ok_or_else(|| error(StatusCode::FORBIDDEN, "AccessDenied"))?;
    let payload = get("x-amz-content-sha256").ok_or_else(denied)?;
    if payload != sigv4::sha256_hex(body) {
        return Err(error(StatusCode::BAD_REQUEST, "XAmzContentSHA256Mismatch"));
    }
    let amz_date = get("x-amz-date").ok_or_else(denied)?;
    if amz_date.len() < 8 {
        return Err(denied());
    }
    let signed = auth
        .split("SignedHeaders=")
        .nth(1)
        .and_then(|s| s.split(',').next())
        .ok_or_else(denied)?;
    let mut signed_headers = Vec::new();
    for name in signed.split(';') {
        signed_headers.push((name, get(name).ok_or_else(denied)?));
    }
    let q: Vec<(&str, &str)> = query.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
    let expected = sigv4::authorization(
        &Credentials {
            access_key: ACCESS_KEY.into(),
            secret_key: SECRET_KEY.into(),
        },
        REGION,
        "s3",
        amz_date,
        &CanonicalRequest {
            method: method.as_str(),
            path,
            query: &q,
            headers: &signed_headers,
            payload_sha256: payload,
        },
    );
    if expected == auth { Ok(()) } else { Err(denied()) }
}

fn parse_range(h: &str, size: usize) -> Option<Result<(usize, usize), ()>> {
    let spec = h.strip_prefix("bytes=")?;
    let (a, b) = spec.split_once('-')?;
    let start: usize = a.parse().ok()?;
    if start >= size {
        return Some(Err(()));
    }
    let end = match b {
        "" => size,
        b => b.parse::<usize>().ok()?.saturating_add(1).min(size),
    };
    Some(Ok((start, end)))
}

fn part_numbers(body: &str) -> Vec<u32> {
    body.split("<PartNumber>")
        .skip(1)
        .filter_map(|s| s.split("</PartNumber>").next()?.trim().parse().ok())
        .collect()
}

async fn handle(
    State(s): State<Shared>,
    method: Method,
    Path(params): Path<HashMap<String, String>>,
    Query(query): Query<Vec<(String, String)>>,
    headers: HeaderMap,
    body: Bytes,
) -> Response {
    s.requests.fetch_add(1, Ordering::Relaxed);
    if !s.available.load(Ordering::SeqCst) {
        return error(StatusCode::SERVICE_UNAVAILABLE, "ServiceUnavailable");
    }
    let bucket = params.get("bucket").cloned().unwrap_or_default();
    let key = params.get("key").cloned();
    let path = match &key {
        Some(k) => format!("/{bucket}/{k}"),
        None => format!("/{bucket}"),
    };
    if let Err(resp) = check_signature(&method, &path, &query, &headers, &body) {
        return resp;
    }
    let q: HashMap<&str, &str> = query.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
    let Some(key) = key else {
        return if method == Method::GET {
            list(&s, &bucket, &q)
        } else {
            error(StatusCode::METHOD_NOT_ALLOWED, "MethodNotAllowed")
        };
    };
    let id = (bucket.clone(), key.clone());
    match method {
        Method::PUT => {
            if let (Some(n), Some(upload_id)) = (q.get("partNumber"), q.get("uploadId")) {
                let Ok(n) = n.parse::<u32>() else {
                    return error(StatusCode::BAD_REQUEST, "InvalidArgument");
                };
                let mut uploads = s.uploads.lock().unwrap();
                let Some(u) = uploads.get_mut(*upload_id) else {
                    return error(StatusCode::NOT_FOUND, "NoSuchUpload");
                };
                let etag = format!("\"{}\"", &sigv4::sha256_hex(&body)[..32]);
                u.parts.insert(n, body.to_vec());
                return (StatusCode::OK, [(header::ETAG, etag)]).into_response();
            }
            s.objects.lock().unwrap().insert(id, body.to_vec());
            StatusCode::OK.into_response()
        }
        Method::GET | Method::HEAD => {
            let objects = s.objects.lock().unwrap();
            let Some(data) = objects.get(&id) else {
                return error(StatusCode::NOT_FOUND, "NoSuchKey");
            };
            let range = headers.get(header::RANGE).and_then(|v| v.to_str().ok());
            match range.and_then(|r| parse_range(r, data.len())) {
                Some(Err(())) => error(StatusCode::RANGE_NOT_SATISFIABLE, "InvalidRange"),
                Some(Ok((a, b))) => (
                    StatusCode::PARTIAL_CONTENT,
                    [(header::CONTENT_RANGE, format!("bytes {a}-{}/{}", b - 1, data.len()))],
                    data[a..b].to_vec(),
                )
                    .into_response(),
                None => (StatusCode::OK, data.clone()).into_response(),
            }
        }
        Method::DELETE => {
            if let Some(upload_id) = q.get("uploadId") {
                s.uploads.lock().unwrap().remove(*upload_id);
            } else {
                s.objects.lock().unwrap().remove(&id);
            }
            StatusCode::NO_CONTENT.into_response()
        }
        Method::POST if q.contains_key("uploads") => {
            let upload_id = format!("upload-{}", s.next_upload.fetch_add(1, Ordering::SeqCst));
            s.uploads.lock().unwrap().insert(
                upload_id.clone(),
                Upload {
                    bucket: bucket.clone(),
                    key: key.clone(),
                    parts: BTreeMap::new(),
                },
            );
            xml(format!(
                "<?xml version=\"1.0\" encoding=\"UTF-8\"?><InitiateMultipartUploadResult>\
                 <Bucket>{}</Bucket><Key>{}</Key><UploadId>{upload_id}</UploadId></InitiateMultipartUploadResult>",
                xml_escape(&bucket),
                xml_escape(&key)
            ))
        }
        Method::POST if q.contains_key("uploadId") => {
            let Some(upload) = s.uploads.lock().unwrap().remove(q["uploadId"]) else {
                return error(StatusCode::NOT_FOUND, "NoSuchUpload");
            };
            if (upload.bucket.as_str(), upload.key.as_str()) != (bucket.as_str(), key.as_str()) {
                return error(StatusCode::BAD_REQUEST, "InvalidRequest");
            }
            let listed = part_numbers(&String::from_utf8_lossy(&body));
            let mut data = Vec::new();
            for (i, n) in listed.iter().enumerate() {
                let Some(p) = upload.parts.get(n) else {
                    return error(StatusCode::BAD_REQUEST, "InvalidPart");
                };
                if i + 1 < listed.len() && (p.len() as u64) < s.min_part_bytes {
                    return error(StatusCode::BAD_REQUEST, "EntityTooSmall");
                }
                data.extend_from_slice(p);
            }
            s.objects.lock().unwrap().insert(id, data);
            xml(format!(
                "<?xml version=\"1.0\" encoding=\"UTF-8\"?><CompleteMultipartUploadResult>\
                 <Bucket>{}</Bucket><Key>{}</Key></CompleteMultipartUploadResult>",
                xml_escape(&bucket),
                xml_escape(&key)
            ))
        }
        _ => error(StatusCode::METHOD_NOT_ALLOWED, "MethodNotAllowed"),
    }
}

fn list(s: &Inner, bucket: &str, q: &HashMap<&str, &str>) -> Response {
    if q.get("list-type") != Some(&"2") {
        return error(StatusCode::BAD_REQUEST, "InvalidArgument");
    }
    let prefix = q.get("prefix").copied().unwrap_or("");
    let after = q.get("continuation-token").copied();
    let objects = s.objects.lock().unwrap();
    let mut matching = objects
        .iter()
        .filter(|((b, k), _)| b == bucket && k.starts_with(prefix) && after.is_none_or(|t| k.as_str() > t));
    let page: Vec<_> = matching.by_ref().take(s.page_size).collect();
    let truncated = matching.next().is_some();
    let mut out = String::from("<?xml version=\"1.0\" encoding=\"UTF-8\"?><ListBucketResult>");
    out.push_str(&format!("<Name>{}</Name><Prefix>{}</Prefix>", xml_escape(bucket), xml_escape(prefix)));
    for ((_, k), v) in &page {
        out.push_str(&format!("<Contents><Key>{}</Key><Size>{}</Size></Contents>", xml_escape(k), v.len()));
    }
    out.push_str(&format!("<KeyCount>{}</KeyCount><IsTruncated>{truncated}</IsTruncated>", page.len()));
    if truncated {
        let last = &page.last().expect("non-empty page").0.1;
        out.push_str(&format!("<NextContinuationToken>{}</NextContinuationToken>", xml_escape(last)));
    }
    out.push_str("</ListBucketResult>");
    xml(out)
}

#[derive(Debug, Clone, Copy)]
pub struct FakeS3Options {
    /// Keys per ListObjectsV2 page.
    pub page_size: usize,
    /// Smallest non-final part accepted when completing an upload.
    pub min_part_bytes: u64,
}

impl Default for FakeS3Options {
    fn default() -> Self {
        FakeS3Options {
            page_size: 1000,
            min_part_bytes: 0,
        }
    }
}

/// A running fake endpoint; shuts down when dropped.
pub struct FakeS3 {
    addr: SocketAddr,
    inner: Shared,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<thread::JoinHandle<()>>,
}

impl FakeS3 {
    pub fn start(opts: FakeS3Options) -> std::io::Result<FakeS3> {
        let inner = Arc::new(Inner {
            objects: Mutex::new(BTreeMap::new()),
            uploads: Mutex::new(HashMap::new()),
            next_upload: AtomicU64::new(1),
            page_size: opts.page_size.max(1),
            min_part_bytes: opts.min_part_bytes,
            available: AtomicBool::new(true),
            requests: AtomicU64::new(0),
        });
        let app = Router::new()
            .route("/{bucket}", any(handle))
            .route("/{bucket}/{*key}", any(handle))
            .with_state(inner.clone());
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()?;
        let listener = rt.block_on(tokio::net::TcpListener::bind("127.0.0.1:0"))?;
        let addr = listener.local_addr()?;
        let (tx, rx) = oneshot::channel::<()>();
        let thread = thread::spawn(move || {
            rt.block_on(async move {
                let _ = axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = rx.await;
                    })
                    .await;
            });
        });
        Ok(FakeS3 {
            addr,
            inner,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn endpoint(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Client settings that sign with the expected credentials.
    pub fn config(&self) -> S3Config {
        S3Config {
            endpoint: self.endpoint(),
            region: REGION.into(),
            access_key: ACCESS_KEY.into(),
            secret_key: SECRET_KEY.into(),
            timeout_ms: 10_000,
        }
    }

    pub fn set_available(&self, up: bool) {
        self.inner.available.store(up, Ordering::SeqCst);
    }

    pub fn object(&self, bucket: &str, key: &str) -> Option<Vec<u8>> {
        self.inner
            .objects
            .lock()
            .unwrap()
            .get(&(bucket.to_string(), key.to_string()))
            .cloned()
    }

    pub fn open_uploads(&self) -> usize {
        self.inner.uploads.lock().unwrap().len()
    }

    pub fn requests(&self) -> u64 {
        self.inner.requests.load(Ordering::Relaxed)
    }
}

impl Drop for FakeS3 {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
