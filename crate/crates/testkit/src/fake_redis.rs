//! A small RESP2 server holding strings and sets, with WATCH/MULTI/EXEC.
//!
//! Enough of the command set for the metastore's Redis backend: GET, SET
//! (with NX), SETNX, DEL, EXISTS, SADD, SCARD, SMEMBERS, SCAN with MATCH
//! and COUNT, WATCH, UNWATCH, MULTI, EXEC, DISCARD, PING, SELECT and CLIENT.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{self, BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Value {
    Str(Vec<u8>),
    Set(BTreeSet<Vec<u8>>),
}

#[derive(Default)]
struct Db {
    data: BTreeMap<Vec<u8>, Value>,
    /// Bumped on every write to a key, including deletes.
    versions: HashMap<Vec<u8>, u64>,
    clock: u64,
}

impl Db {
    fn touch(&mut self, key: &[u8]) {
        self.clock += 1;
        self.versions.insert(key.to_vec(), self.clock);
    }

    fn version(&self, key: &[u8]) -> u64 {
        self.versions.get(key).copied().unwrap_or(0)
    }
}

enum Reply {
    Ok,
    Status(&'static str),
    Int(i64),
    Bulk(Option<Vec<u8>>),
    Array(Option<Vec<Reply>>),
    Err(String),
}

impl Reply {
    fn write(&self, out: &mut Vec<u8>) {
        match self {
            Reply::Ok => out.extend_from_slice(b"+OK\r\n"),
            Reply::Status(s) => out.extend_from_slice(format!("+{s}\r\n").as_bytes()),
            Reply::Int(n) => out.extend_from_slice(format!(":{n}\r\n").as_bytes()),
            Reply::Bulk(None) => out.extend_from_slice(b"$-1\r\n"),
            Reply::Bulk(Some(b)) => {
                out.extend_from_slice(format!("${}\r\n", b.len()).as_bytes());
                out.extend_from_slice(b);
                out.extend_from_slice(b"\r\n");
            }
            Reply::Array(None) => out.extend_from_slice(b"*-1\r\n"),
            Reply::Array(Some(items)) => {
                out.extend_from_slice(format!("*{}\r\n", items.len()).as_bytes());
                for i in items {
                    i.write(out);
                }
            }
            Reply::Err(e) => out.extend_from_slice(format!("-{e}\r\n").as_bytes()),
        }
    }
}

const WRONGTYPE: &str = "WRONGTYPE Operation against a key holding the wrong kind of value";

/// Runs one data command against the database.
fn apply(db: &mut Db, args: &[Vec<u8>]) -> Reply {
    let name = String::from_utf8_lossy(&args[0]).to_ascii_uppercase();
    let argc = args.len() - 1;
    let arity = |n: usize| -> Result<(), Reply> {
        if argc < n {
            Err(Reply::Err(format!("ERR wrong number of arguments for '{}'", name.to_lowercase())))
        } else {
            Ok(())
        }
    };
    let result = (|| -> Result<Reply, Reply> {
        Ok(match name.as_str() {
            "PING" => Reply::Status("PONG"),
            "GET" => {
                arity(1)?;
                match db.data.get(&args[1]) {
                    None => Reply::Bulk(None),
                    Some(Value::Str(v)) => Reply::Bulk(Some(v.clone())),
                    Some(Value::Set(_)) => Reply::Err(WRONGTYPE.into()),
                }
            }
            "SET" => {
                arity(2)?;
                let nx = args[3..].iter().any(|a| a.eq_ignore_ascii_case(b"NX"));
                if nx && db.data.contains_key(&args[1]) {
                    Reply::Bulk(None)
                } else {
                    db.data.insert(args[1].clone(), Value::Str(args[2].clone()));
                    db.touch(&args[1]);
                    Reply::Ok
                }
            }
            "SETNX" => {
                arity(2)?;
                if db.data.contains_key(&args[1]) {
                    Reply::Int(0)
                } else {
                    db.data.insert(args[1].clone(), Value::Str(args[2].clone()));
                    db.touch(&args[1]);
                    Reply::Int(1)
                }
            }
            "DEL" => {
                arity(1)?;
                let mut n = 0;
                for k in &args[1..] {
                    if db.data.remove(k).is_some() {
                        db.touch(k);
                        n += 1;
                    }
                }
                Reply::Int(n)
            }
            "EXISTS" => {
                arity(1)?;
                Reply::Int(args[1..].iter().filter(|k| db.data.contains_key(*k)).count() as i64)
            }
            "SADD" => {
                arity(2)?;
                let entry = db
                    .data
                    .entry(args[1].clone())
                    .or_insert_with(|| Value::Set(BTreeSet::new()));
                let Value::Set(set) = entry else {
                    return Err(Reply::Err(WRONGTYPE.into()));
                };
                let added = args[2..].iter().filter(|m| set.insert(m.to_vec())).count();
                db.touch(&args[1]);
                Reply::Int(added as i64)
            }
            "SCARD" => {
                arity(1)?;
                match db.data.get(&args[1]) {
                    None => Reply::Int(0),
                    Some(Value::Set(s)) => Reply::Int(s.len() as i64),
                    Some(Value::Str(_)) => Reply::Err(WRONGTYPE.into()),
                }
            }
            "SMEMBERS" => {
                arity(1)?;
                match db.data.get(&args[1]) {
                    None => Reply::Array(Some(Vec::new())),
                    Some(Value::Set(s)) => Reply::Array(Some(s.iter().map(|m| Reply::Bulk(Some(m.clone()))).collect())),
                    Some(Value::Str(_)) => Reply::Err(WRONGTYPE.into()),
                }
            }
            "SCAN" => {
                arity(1)?;
                let cursor: usize = std::str::from_utf8(&args[1])
                    .ok()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Reply::Err("ERR invalid cursor".into()))?;
                let mut pattern: Option<&[u8]> = None;
                let mut count = 10usize;
                let mut i = 2;
                while i + 1 < args.len() {
                    if args[i].eq_ignore_ascii_case(b"MATCH") {
                        pattern = Some(&args[i + 1]);
                    } else if args[i].eq_ignore_ascii_case(b"COUNT") {
                        count = std::str::from_utf8(&args[i + 1])
                            .ok()
                            .and_then(|s| s.parse().ok())
                            .unwrap_or(10)
                            .max(1);
                    }
                    i += 2;
                }
                // The cursor is a position in key order; keys written during
                // an iteration may or may not be returned, as in Redis.
                let keys: Vec<&Vec<u8>> = db.data.keys().skip(cursor).take(count).collect();
                let next = if cursor + keys.len() >= db.data.len() { 0 } else { cursor + keys.len() };
                let matched = keys
                    .into_iter()
                    .filter(|k| pattern.is_none_or(|p| glob_match(p, k)))
                    .map(|k| Reply::Bulk(Some(k.clone())))
                    .collect();
                Reply::Array(Some(vec![
                    Reply::Bulk(Some(next.to_string().into_bytes())),
                    Reply::Array(Some(matched)),
                ]))
            }
            "SELECT" | "CLIENT" => Reply::Ok,
            other => Reply::Err(format!("ERR unknown command '{other}'")),
        })
    })();
    result.unwrap_or_else(|e| e)
}

/// Redis-style glob: `*`, `?`, `[...]` and backslash escapes.
pub fn glob_match(pattern: &[u8], text: &[u8]) -> bool {
    let (mut p, mut t) = (0, 0);
    let mut backtrack: Option<(usize, usize)> = None;
    while t < text.len() {
        if p < pattern.len() {
            match pattern[p] {
                b'*' => {
                    backtrack = Some((p, t));
                    p += 1;
                    continue;
                }
                b'?' => {
                    p += 1;
                    t += 1;
                    continue;
                }
                b'[' => {
                    if let Some((matched, next)) = class_match(&pattern[p..], text[t]) {
                        if matched {
                            p += next;
                            t += 1;
                            continue;
                        }
                    }
                }
                b'\\' if p + 1 < pattern.len() => {
                    if pattern[p + 1] == text[t] {
                        p += 2;
                        t += 1;
                        continue;
                    }
                }
                c if c == text[t] => {
                    p += 1;
                    t += 1;
                    continue;
                }
                _ => {}
            }
        }
        match backtrack {
            Some((bp, bt)) => {
                p = bp + 1;
                t = bt + 1;
                backtrack = Some((bp, bt + 1));
            }
            None => return false,
        }
    }
    pattern[p..].iter().all(|&c| c == b'*')
}

/// Matches `[...]` at the start of `pat`; returns whether `c` is in the class
/// and the class length.
fn class_match(pat: &[u8], c: u8) -> Option<(bool, usize)> {
    let mut i = 1;
    let negate = pat.get(1) == Some(&b'^');
    if negate {
        i += 1;
    }
    let mut hit = false;
    while i < pat.len() && pat[i] != b']' {
        if pat[i] == b'\\' && i + 1 < pat.len() {
            hit |= pat[i + 1] == c;
            i += 2;
        } else if i + 2 < pat.len() && pat[i + 1] == b'-' && pat[i + 2] != b']' {
            hit |= (pat[i]..=pat[i + 2]).contains(&c);
            i += 3;
        } else {
            hit |= pat[i] == c;
            i += 1;
        }
    }
    (i < pat.len()).then_some((hit != negate, i + 1))
}

fn read_command(r: &mut impl BufRead) -> io::Result<Option<Vec<Vec<u8>>>> {
    let mut line = String::new();
    if r.read_line(&mut line)? == 0 {
        return Ok(None);
    }
    let line = line.trim_end();
    let bad = || io::Error::new(io::ErrorKind::InvalidData, "malformed RESP");
    let Some(n) = line.strip_prefix('*') else {
        // Inline command.
        return Ok(Some(line.split_whitespace().map(|s| s.as_bytes().to_vec()).collect()));
    };
    let n: usize = n.parse().map_err(|_| bad())?;
    let mut args = Vec::with_capacity(n);
    for _ in 0..n {
        let mut hdr = String::new();
        r.read_line(&mut hdr)?;
        let len: usize = hdr.trim_end().strip_prefix('$').ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let mut buf = vec![0; len + 2];
        r.read_exact(&mut buf)?;
        buf.truncate(len);
        args.push(buf);
    }
    Ok(Some(args))
}

struct Shared {
    db: Mutex<Db>,
    commands: AtomicUsize,
    aborted_execs: AtomicUsize,
}

fn serve_connection(shared: Arc<Shared>, stream: TcpStream) -> io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = stream;
    let mut watched: Vec<(Vec<u8>, u64)> = Vec::new();
    let mut queued: Option<Vec<Vec<Vec<u8>>>> = None;
    while let Some(args) = read_command(&mut reader)? {
        if args.is_empty() {
            continue;
        }
        shared.commands.fetch_add(1, Ordering::Relaxed);
        let name = String::from_utf8_lossy(&args[0]).to_ascii_uppercase();
        let reply = match name.as_str() {
            "MULTI" if queued.is_some() => Reply::Err("ERR MULTI calls can not be nested".into()),
            "MULTI" => {
                queued = Some(Vec::new());
                Reply::Ok
            }
            "DISCARD" => match queued.take() {
                Some(_) => {
                    watched.clear();
                    Reply::Ok
                }
                None => Reply::Err("ERR DISCARD without MULTI".into()),
            },
            "EXEC" => match queued.take() {
                None => Reply::Err("ERR EXEC without MULTI".into()),
                Some(cmds) => {
                    let mut db = shared.db.lock().unwrap();
                    let dirty = watched.iter().any(|(k, v)| db.version(k) != *v);
                    watched.clear();
                    if dirty {
                        shared.aborted_execs.fetch_add(1, Ordering::Relaxed);
                        Reply::Array(None)
                    } else {
                        Reply::Array(Some(cmds.iter().map(|c| apply(&mut db, c)).collect()))
                    }
                }
            },
            "WATCH" if queued.is_some() => Reply::Err("ERR WATCH inside MULTI is not allowed".into()),
            "WATCH" => {
                let db = shared.db.lock().unwrap();
                watched.extend(args[1..].iter().map(|k| (k.clone(), db.version(k))));
                Reply::Ok
            }
            "UNWATCH" => {
                watched.clear();
                Reply::Ok
            }
            _ => match queued.as_mut() {
                Some(q) => {
                    q.push(args);
                    Reply::Status("QUEUED")
                }
                None => apply(&mut shared.db.lock().unwrap(), &args),
            },
        };
        let mut out = Vec::new();
        reply.write(&mut out);
        writer.write_all(&out)?;
    }
    Ok(())
}

/// A running fake server; stops accepting when dropped.
pub struct FakeRedis {
    addr: SocketAddr,
    shared: Arc<Shared>,
    stop: Arc<AtomicBool>,
}

impl FakeRedis {
    pub fn start() -> io::Result<FakeRedis> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        let shared = Arc::new(Shared {
            db: Mutex::new(Db::default()),
            commands: AtomicUsize::new(0),
            aborted_execs: AtomicUsize::new(0),
        });
        let stop = Arc::new(AtomicBool::new(false));
        let (s2, stop2) = (shared.clone(), stop.clone());
        thread::spawn(move || {
            for conn in listener.incoming() {
                if stop2.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(conn) = conn else { continue };
                let s3 = s2.clone();
                thread::spawn(move || {
                    let _ = serve_connection(s3, conn);
                });
            }
        });
        Ok(FakeRedis { addr, shared, stop })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn get(&self, key: &str) -> Option<Value> {
        self.shared.db.lock().unwrap().data.get(key.as_bytes()).cloned()
    }

    pub fn keys(&self) -> Vec<String> {
        self.shared
            .db
            .lock()
            .unwrap()
            .data
            .keys()
            .map(|k| String::from_utf8_lossy(k).into_owned())
            .collect()
    }

    pub fn commands_served(&self) -> usize {
        self.shared.commands.load(Ordering::Relaxed)
    }

    /// EXECs refused because a watched key changed.
    pub fn aborted_transactions(&self) -> usize {
        self.shared.aborted_execs.load(Ordering::Relaxed)
    }
}

impl Drop for FakeRedis {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Wake the accept loop so it sees the flag.
        let _ = TcpStream::connect(self.addr);
    }
}
