//! Suggestion providers: the static analysis that names the members reachable
//! through a dereferenced receiver.
//!
//! [`LspClient`] asks a language server for completions over stdio.
//! [`FixtureProvider`] answers from a JSON table keyed by file and dot offset.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::vocab::{DelimiterSet, SuggestionSet};

#[derive(Debug, thiserror::Error)]
pub enum SuggestError {
    #[error("document not open: {0}")]
    DocumentNotOpen(String),
    #[error("language server did not answer {method} within {ms} ms")]
    Timeout { method: String, ms: u64 },
    #[error("language server transport: {0}")]
    Transport(String),
    #[error("language server error on {method}: {message}")]
    Protocol { method: String, message: String },
    #[error("position {0:?} is outside the document")]
    BadPosition(Position),
    #[error("fixture item {item:?} for {file}@{offset} is not a bare identifier")]
    ImpureFixture { file: String, offset: usize, item: String },
    #[error("provider config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Zero-based line and UTF-16 column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Position {
    pub line: u32,
    pub character: u32,
}

pub fn byte_offset_to_position(text: &str, offset: usize) -> Option<Position> {
    if offset > text.len() || !text.is_char_boundary(offset) {
        return None;
    }
    let before = &text[..offset];
    let line_start = before.rfind('\n').map_or(0, |i| i + 1);
    Some(Position {
        line: before.bytes().filter(|&b| b == b'\n').count() as u32,
        character: before[line_start..].encode_utf16().count() as u32,
    })
}

pub fn position_to_byte_offset(text: &str, pos: Position) -> Option<usize> {
    let mut line_start = 0;
    for _ in 0..pos.line {
        line_start += text[line_start..].find('\n')? + 1;
    }
    let line_end = text[line_start..].find('\n').map_or(text.len(), |i| line_start + i);
    let mut units = 0u32;
    for (i, c) in text[line_start..line_end].char_indices() {
        if units == pos.character {
            return Some(line_start + i);
        }
        units += c.len_utf16() as u32;
        if units > pos.character {
            return None;
        }
    }
    (units == pos.character).then_some(line_end)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuggestionQuery {
    /// Path relative to the workspace root.
    pub file: String,
    /// The whole document as the analysis should see it.
    pub content: String,
    /// Immediately after the triggering `.`.
    pub position: Position,
}

impl SuggestionQuery {
    /// Query for the dot at byte `dot_offset` of `content`.
    pub fn at_dot(file: impl Into<String>, content: String, dot_offset: usize) -> Result<Self, SuggestError> {
        let position = byte_offset_to_position(&content, dot_offset + 1).ok_or(SuggestError::BadPosition(Position {
            line: u32::MAX,
            character: u32::MAX,
        }))?;
        Ok(Self {
            file: file.into(),
            content,
            position,
        })
    }

    pub fn byte_offset(&self) -> Option<usize> {
        position_to_byte_offset(&self.content, self.position)
    }
}

/// Static analysis behind a suggestion query. Implementations must accept
/// concurrent calls.
pub trait SuggestionProvider: Send + Sync {
    fn open_document(&self, file: &str, content: &str) -> Result<(), SuggestError>;
    fn query(&self, q: &SuggestionQuery) -> Result<SuggestionSet, SuggestError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    #[default]
    Fixture,
    Lsp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    /// Fixture table path (fixture kind).
    pub fixture: Option<PathBuf>,
    /// Language server command line (lsp kind).
    pub server_launch: Vec<String>,
    pub workspace_root: Option<PathBuf>,
    pub timeout_ms: u64,
    pub init_timeout_ms: u64,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            kind: ProviderKind::Fixture,
            fixture: None,
            server_launch: Vec::new(),
            workspace_root: None,
            timeout_ms: 10_000,
            init_timeout_ms: 120_000,
        }
    }
}

impl ProviderConfig {
    pub fn build(&self) -> Result<Arc<dyn SuggestionProvider>, SuggestError> {
        if self.timeout_ms == 0 {
            return Err(SuggestError::Config("timeout_ms must be positive".into()));
        }
        match self.kind {
            ProviderKind::Fixture => {
                let path = self
                    .fixture
                    .as_ref()
                    .ok_or_else(|| SuggestError::Config("fixture provider needs `fixture`".into()))?;
                Ok(Arc::new(FixtureProvider::load(path)?))
            }
            ProviderKind::Lsp => {
                let root = self
                    .workspace_root
                    .as_ref()
                    .ok_or_else(|| SuggestError::Config("lsp provider needs `workspace_root`".into()))?;
                if !root.is_dir() {
                    return Err(SuggestError::Config(format!("workspace_root {} does not exist", root.display())));
                }
                if self.server_launch.is_empty() {
                    return Err(SuggestError::Config("lsp provider needs `server_launch`".into()));
                }
                Ok(Arc::new(LspClient::spawn(
                    &self.server_launch,
                    root,
                    Duration::from_millis(self.timeout_ms),
                    Duration::from_millis(self.init_timeout_ms),
                )?))
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixtureEntry {
    pub file: String,
    pub offset: usize,
    pub items: Vec<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FixtureFile {
    pub suggestions: Vec<FixtureEntry>,
}

/// Suggestions looked up by (relative file, byte offset of the `.`).
#[derive(Debug, Clone, Default)]
pub struct FixtureProvider {
    table: HashMap<(String, usize), SuggestionSet>,
}

impl FixtureProvider {
    pub fn new(entries: Vec<FixtureEntry>) -> Result<Self, SuggestError> {
        let delims = DelimiterSet::java();
        let mut table = HashMap::new();
        for e in entries {
            if let Some(bad) = e.items.iter().find(|i| i.is_empty() || delims.any_in(i)) {
                return Err(SuggestError::ImpureFixture {
                    file: e.file,
                    offset: e.offset,
                    item: bad.clone(),
                });
            }
            let set: SuggestionSet = e.items.into_iter().collect();
            table.insert((e.file, e.offset), set);
        }
        Ok(Self { table })
    }

    pub fn from_json(text: &str) -> Result<Self, SuggestError> {
        let file: FixtureFile = serde_json::from_str(text)?;
        Self::new(file.suggestions)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SuggestError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

impl SuggestionProvider for FixtureProvider {
    fn open_document(&self, _file: &str, _content: &str) -> Result<(), SuggestError> {
        Ok(())
    }

    fn query(&self, q: &SuggestionQuery) -> Result<SuggestionSet, SuggestError> {
        let after_dot = q.byte_offset().ok_or(SuggestError::BadPosition(q.position))?;
        let Some(dot) = after_dot.checked_sub(1) else {
            return Ok(SuggestionSet::new());
        };
        Ok(self.table.get(&(q.file.clone(), dot)).cloned().unwrap_or_default())
    }
}

// Completion item kinds kept as member names.
const KIND_METHOD: u64 = 2;
const KIND_FIELD: u64 = 5;
const KIND_PROPERTY: u64 = 10;
const KIND_ENUM_MEMBER: u64 = 20;
const KIND_CONSTANT: u64 = 21;

/// Bare member names from a `textDocument/completion` result.
pub fn completion_names(result: &Value) -> SuggestionSet {
    let items = match result {
        Value::Array(items) => items.as_slice(),
        Value::Object(list) => list.get("items").and_then(Value::as_array).map_or(&[][..], Vec::as_slice),
        _ => &[],
    };
    let delims = DelimiterSet::java();
    items
        .iter()
        .filter(|item| {
            matches!(
                item.get("kind").and_then(Value::as_u64),
                Some(KIND_METHOD | KIND_FIELD | KIND_PROPERTY | KIND_ENUM_MEMBER | KIND_CONSTANT)
            )
        })
        .filter_map(|item| {
            let text = item
                .get("insertText")
                .and_then(Value::as_str)
                .or_else(|| item.get("label").and_then(Value::as_str))?;
            let end = text.find(|c: char| c == '(' || c.is_whitespace()).unwrap_or(text.len());
            let name = &text[..end];
            (!name.is_empty() && !delims.any_in(name)).then(|| name.to_string())
        })
        .collect()
}

pub fn write_frame(w: &mut impl Write, msg: &Value) -> std::io::Result<()> {
    let body = serde_json::to_vec(msg)?;
    write!(w, "Content-Length: {}\r\n\r\n", body.len())?;
    w.write_all(&body)?;
    w.flush()
}

/// Reads one `Content-Length` framed message; `Ok(None)` at clean end of stream.
pub fn read_frame(r: &mut impl BufRead) -> std::io::Result<Option<Value>> {
    let mut len = None;
    let mut line = String::new();
    loop {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Ok(None);
        }
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if trimmed.is_empty() {
            if len.is_some() {
                break;
            }
            continue;
        }
        if let Some((name, value)) = trimmed.split_once(':') {
            if name.eq_ignore_ascii_case("content-length") {
                len = value.trim().parse::<usize>().ok();
            }
        }
    }
    let mut body = vec![0; len.unwrap_or(0)];
    r.read_exact(&mut body)?;
    serde_json::from_slice(&body)
        .map(Some)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}

type SharedWriter = Arc<Mutex<Box<dyn Write + Send>>>;

struct Session {
    next_id: i64,
    responses: Receiver<Value>,
    /// Version and last synced text per open document.
    open: HashMap<String, (i64, String)>,
}

/// Language-server client over any byte transport, normally a child's stdio.
///
/// One request is in flight at a time; concurrent callers queue on the session lock.
pub struct LspClient {
    session: Mutex<Session>,
    writer: SharedWriter,
    root: PathBuf,
    timeout: Duration,
    child: Mutex<Option<Child>>,
}

impl LspClient {
    pub fn spawn(cmd: &[String], root: &Path, timeout: Duration, init_timeout: Duration) -> Result<Self, SuggestError> {
        let (prog, args) = cmd
            .split_first()
            .ok_or_else(|| SuggestError::Config("empty server command".into()))?;
        let mut child = Command::new(prog)
            .args(args)
            .current_dir(root)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let client = Self::connect(stdout, stdin, root, timeout, init_timeout)?;
        *client.child.lock().unwrap() = Some(child);
        Ok(client)
    }

    /// Runs the initialize handshake over `reader`/`writer`.
    pub fn connect(
        reader: impl Read + Send + 'static,
        writer: impl Write + Send + 'static,
        root: &Path,
        timeout: Duration,
        init_timeout: Duration,
    ) -> Result<Self, SuggestError> {
        let writer: SharedWriter = Arc::new(Mutex::new(Box::new(writer)));
        let (tx, rx) = mpsc::channel();
        let reply_writer = Arc::clone(&writer);
        std::thread::spawn(move || {
            let mut reader = BufReader::new(reader);
            while let Ok(Some(msg)) = read_frame(&mut reader) {
                match (msg.get("id"), msg.get("method")) {
                    // Server-to-client request: answer with a null result.
                    (Some(id), Some(_)) => {
                        let reply = json!({"jsonrpc": "2.0", "id": id, "result": null});
                        let _ = write_frame(&mut *reply_writer.lock().unwrap(), &reply);
                    }
                    (Some(_), None) => {
                        if tx.send(msg).is_err() {
                            break;
                        }
                    }
                    _ => {}
                }
            }
        });
        let client = Self {
            session: Mutex::new(Session {
                next_id: 1,
                responses: rx,
                open: HashMap::new(),
            }),
            writer,
            root: root.to_path_buf(),
            timeout,
            child: Mutex::new(None),
        };
        let root_uri = client.uri(Path::new(""));
        {
            let mut s = client.session.lock().unwrap();
            client.request(
                &mut s,
                "initialize",
                json!({
                    "processId": std::process::id(),
                    "rootUri": root_uri,
                    "workspaceFolders": [{"uri": root_uri, "name": "workspace"}],
                    "capabilities": {
                        "textDocument": {
                            "synchronization": {"didSave": false},
                            "completion": {"completionItem": {"snippetSupport": false}}
                        }
                    }
                }),
                init_timeout,
            )?;
            client.notify("initialized", json!({}))?;
        }
        Ok(client)
    }

    fn uri(&self, rel: &Path) -> String {
        let abs = self.root.join(rel);
        let mut s = String::from("file://");
        let path = abs.to_string_lossy().replace('\\', "/");
        if !path.starts_with('/') {
            s.push('/');
        }
        for c in path.chars() {
            match c {
                ' ' => s.push_str("%20"),
                '#' => s.push_str("%23"),
                '%' => s.push_str("%25"),
                '?' => s.push_str("%3F"),
                _ => s.push(c),
            }
        }
        s
    }

    fn notify(&self, method: &str, params: Value) -> Result<(), SuggestError> {
        let msg = json!({"jsonrpc": "2.0", "method": method, "params": params});
        write_frame(&mut *self.writer.lock().unwrap(), &msg).map_err(|e| SuggestError::Transport(e.to_string()))
    }

    fn request(&self, s: &mut Session, method: &str, params: Value, timeout: Duration) -> Result<Value, SuggestError> {
        let id = s.next_id;
        s.next_id += 1;
        let msg = json!({"jsonrpc": "2.0", "id": id, "method": method, "params": params});
        write_frame(&mut *self.writer.lock().unwrap(), &msg).map_err(|e| SuggestError::Transport(e.to_string()))?;
        let deadline = Instant::now() + timeout;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            match s.responses.recv_timeout(left) {
                // Late answers to earlier timed-out requests are dropped.
                Ok(resp) if resp.get("id").and_then(Value::as_i64) != Some(id) => continue,
                Ok(resp) => {
                    if let Some(err) = resp.get("error") {
                        return Err(SuggestError::Protocol {
                            method: method.to_string(),
                            message: err.get("message").and_then(Value::as_str).unwrap_or("unknown").to_string(),
                        });
                    }
                    return Ok(resp.get("result").cloned().unwrap_or(Value::Null));
                }
                Err(RecvTimeoutError::Timeout) => {
                    return Err(SuggestError::Timeout {
                        method: method.to_string(),
                        ms: timeout.as_millis() as u64,
                    })
                }
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(SuggestError::Transport("server closed the stream".into()))
                }
            }
        }
    }

    fn sync(&self, s: &mut Session, file: &str, content: &str) -> Result<(), SuggestError> {
        let uri = self.uri(Path::new(file));
        match s.open.get_mut(file) {
            None => {
                self.notify(
                    "textDocument/didOpen",
                    json!({"textDocument": {"uri": uri, "languageId": "java", "version": 1, "text": content}}),
                )?;
                s.open.insert(file.to_string(), (1, content.to_string()));
            }
            Some((_, text)) if text == content => {}
            Some((version, text)) => {
                *version += 1;
                *text = content.to_string();
                self.notify(
                    "textDocument/didChange",
                    json!({
                        "textDocument": {"uri": uri, "version": *version},
                        "contentChanges": [{"text": content}]
                    }),
                )?;
            }
        }
        Ok(())
    }

    pub fn shutdown(&self) -> Result<(), SuggestError> {
        let mut s = self.session.lock().unwrap();
        self.request(&mut s, "shutdown", Value::Null, self.timeout)?;
        self.notify("exit", Value::Null)
    }
}

impl SuggestionProvider for LspClient {
    fn open_document(&self, file: &str, content: &str) -> Result<(), SuggestError> {
        let mut s = self.session.lock().unwrap();
        self.sync(&mut s, file, content)
    }

    fn query(&self, q: &SuggestionQuery) -> Result<SuggestionSet, SuggestError> {
        let mut s = self.session.lock().unwrap();
        if !s.open.contains_key(&q.file) {
            return Err(SuggestError::DocumentNotOpen(q.file.clone()));
        }
        self.sync(&mut s, &q.file, &q.content)?;
        let result = self.request(
            &mut s,
            "textDocument/completion",
            json!({
                "textDocument": {"uri": self.uri(Path::new(&q.file))},
                "position": q.position,
                "context": {"triggerKind": 2, "triggerCharacter": "."}
            }),
            self.timeout,
        )?;
        Ok(completion_names(&result))
    }
}

impl Drop for LspClient {
    fn drop(&mut self) {
        if let Some(mut child) = self.child.lock().unwrap().take() {
            let _ = self.shutdown();
            // Give the server a moment to exit on its own.
            let deadline = Instant::now() + Duration::from_millis(500);
            while Instant::now() < deadline {
                if let Ok(Some(_)) = child.try_wait() {
                    return;
                }
                std::thread::sleep(Duration::from_millis(20));
            }
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}
