use std::fmt;
use std::sync::Mutex;
use std::time::Duration;

use redis::{Commands, Connection};

use super::{KvBackend, MetaError};

const POOL_LIMIT: usize = 16;

/// Backend for an external Redis-protocol server.
///
/// Values are stored as plain strings, completion sets as native sets.
/// Read-modify-write operations use WATCH/MULTI/EXEC and retry on conflict.
pub struct RedisKv {
    client: redis::Client,
    timeout: Duration,
    pool: Mutex<Vec<Connection>>,
}

impl fmt::Debug for RedisKv {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RedisKv")
            .field("addr", &self.client.get_connection_info().addr())
            .finish()
    }
}

fn unavailable(e: redis::RedisError) -> MetaError {
    MetaError::Unavailable(e.to_string())
}

/// Escapes glob metacharacters for a SCAN MATCH pattern.
fn glob_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        if matches!(c, '*' | '?' | '[' | ']' | '\\') {
            out.push('\\');
        }
        out.push(c);
    }
    out
}

impl RedisKv {
    /// Connects lazily; `host:port` is not contacted until the first call.
    pub fn new(host: &str, port: u16, timeout: Duration) -> Result<Self, MetaError> {
        let client = redis::Client::open(format!("redis://{host}:{port}/")).map_err(unavailable)?;
        Ok(RedisKv {
            client,
            timeout,
            pool: Mutex::new(Vec::new()),
        })
    }

    fn with_conn<T>(
        &self,
        f: impl FnOnce(&mut Connection) -> Result<T, MetaError>,
    ) -> Result<T, MetaError> {
        let pooled = self.pool.lock().unwrap_or_else(|p| p.into_inner()).pop();
        let mut con = match pooled {
            Some(c) => c,
            None => {
                let c = self
                    .client
                    .get_connection_with_timeout(self.timeout)
                    .map_err(unavailable)?;
                c.set_read_timeout(Some(self.timeout)).map_err(unavailable)?;
                c.set_write_timeout(Some(self.timeout)).map_err(unavailable)?;
                c
            }
        };
        let out = f(&mut con);
        // A connection that saw a transport error is dropped, not reused.
        if !matches!(out, Err(MetaError::Unavailable(_))) {
            let mut pool = self.pool.lock().unwrap_or_else(|p| p.into_inner());
            if pool.len() < POOL_LIMIT {
                pool.push(con);
            }
        }
        out
    }

    /// WATCHes `watch`, reads `read`, and lets `body` queue writes. Retries
    /// when another client touched a watched key before EXEC.
    fn watched<T>(
        &self,
        watch: &[&str],
        read: &str,
        body: &mut dyn FnMut(Option<&[u8]>, &mut redis::Pipeline) -> Result<T, MetaError>,
        finish: impl Fn(&redis::Value) -> Result<(), MetaError>,
    ) -> Result<T, MetaError> {
        self.with_conn(|con| {
            let mut failed: Option<MetaError> = None;
            let mut result: Option<T> = None;
            redis::transaction(con, watch, |con, pipe| {
                let cur: Option<Vec<u8>> = con.get(read)?;
                match body(cur.as_deref(), pipe) {
                    Err(e) => {
                        failed = Some(e);
                        Ok(Some(()))
                    }
                    Ok(v) => {
                        let resp: Option<redis::Value> = pipe.query(con)?;
                        match resp {
                            None => Ok(None),
                            Some(value) => {
                                if let Err(e) = finish(&value) {
                                    failed = Some(e);
                                }
                                result = Some(v);
                                Ok(Some(()))
                            }
                        }
                    }
                }
            })
            .map_err(unavailable)?;
            match failed {
                Some(e) => Err(e),
                None => Ok(result.expect("transaction committed")),
            }
        })
    }
}

impl KvBackend for RedisKv {
    fn get(&self, key: &str) -> Result<Option<Vec<u8>>, MetaError> {
        self.with_conn(|c| c.get(key).map_err(unavailable))
    }

    fn set(&self, key: &str, value: &[u8]) -> Result<(), MetaError> {
        self.with_conn(|c| c.set(key, value).map_err(unavailable))
    }

    fn set_if_absent(&self, key: &str, value: &[u8]) -> Result<bool, MetaError> {
        self.with_conn(|c| c.set_nx(key, value).map_err(unavailable))
    }

    fn update(
        &self,
        key: &str,
        f: &mut dyn FnMut(Option<&[u8]>) -> Result<Vec<u8>, MetaError>,
    ) -> Result<Vec<u8>, MetaError> {
        self.watched(
            &[key],
            key,
            &mut |cur, pipe| {
                let next = f(cur)?;
                pipe.set(key, &next).ignore();
                Ok(next)
            },
            |_| Ok(()),
        )
    }

    fn guarded_set_add(
        &self,
        guard: &str,
        check: &mut dyn FnMut(Option<&[u8]>) -> Result<(), MetaError>,
        set_key: &str,
        member: &str,
    ) -> Result<usize, MetaError> {
        let count = std::cell::Cell::new(0usize);
        self.watched(
            &[guard],
            guard,
            &mut |cur, pipe| {
                check(cur)?;
                pipe.sadd(set_key, member).ignore().scard(set_key);
                Ok(())
            },
            |value| {
                let n: Vec<usize> = redis::from_redis_value(value.clone()).map_err(|e| {
                    MetaError::Corrupt {
                        key: set_key.to_string(),
                        reason: e.to_string(),
                    }
                })?;
                count.set(n.first().copied().unwrap_or(0));
                Ok(())
            },
        )?;
        Ok(count.get())
    }

    fn set_len(&self, set_key: &str) -> Result<usize, MetaError> {
        self.with_conn(|c| c.scard(set_key).map_err(unavailable))
    }

    fn keys_with_prefix(&self, prefix: &str) -> Result<Vec<String>, MetaError> {
        let pattern = format!("{}*", glob_escape(prefix));
        let mut keys: Vec<String> = self.with_conn(|c| {
            let iter = c.scan_match::<_, String>(&pattern).map_err(unavailable)?;
            iter.map(|k| k.map_err(unavailable)).collect()
        })?;
        keys.sort();
        keys.dedup();
        Ok(keys)
    }

    fn delete(&self, keys: &[String]) -> Result<usize, MetaError> {
        if keys.is_empty() {
            return Ok(0);
        }
        self.with_conn(|c| c.del(keys).map_err(unavailable))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unreachable_server_is_unavailable() {
        let port = std::net::TcpListener::bind("127.0.0.1:0")
            .unwrap()
            .local_addr()
            .unwrap()
            .port();
        let kv = RedisKv::new("127.0.0.1", port, Duration::from_millis(300)).unwrap();
        assert!(matches!(kv.get("job:x:state"), Err(MetaError::Unavailable(_))));
    }

    #[test]
    fn glob_metacharacters_are_escaped() {
        assert_eq!(glob_escape("job:a*b?[c]:"), "job:a\\*b\\?\\[c\\]:");
    }
}
