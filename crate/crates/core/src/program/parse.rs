use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};

use super::{LockDecl, LockKind, LockMode, ParseError, PointeeDecl, Program, Stmt, ThreadDecl};
use crate::ids::{AliasId, LockId, ThreadId};
use crate::memory::{pad_pointee, AccessKind, PointeeId};

#[derive(Debug, Clone, PartialEq, Eq)]
enum Tok {
    Ident(String),
    Number(u64),
    LBrace,
    RBrace,
    Plus,
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    line: usize,
    col: usize,
}

fn tokenize(text: &str) -> Result<Vec<Token>, ParseError> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("");
        let chars: Vec<char> = line.chars().collect();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            let (l, col) = (lineno + 1, i + 1);
            if c.is_whitespace() {
                i += 1;
                continue;
            }
            let single = match c {
                '{' => Some(Tok::LBrace),
                '}' => Some(Tok::RBrace),
                '+' => Some(Tok::Plus),
                _ => None,
            };
            if let Some(tok) = single {
                out.push(Token { tok, line: l, col });
                i += 1;
            } else if c.is_ascii_digit() {
                let start = i;
                while i < chars.len() && chars[i].is_ascii_digit() {
                    i += 1;
                }
                let s: String = chars[start..i].iter().collect();
                let n = s.parse().map_err(|_| ParseError::Syntax {
                    line: l,
                    col,
                    message: format!("number `{s}` is too large"),
                })?;
                out.push(Token { tok: Tok::Number(n), line: l, col });
            } else if c.is_ascii_alphabetic() || c == '_' {
                let start = i;
                while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                    i += 1;
                }
                out.push(Token { tok: Tok::Ident(chars[start..i].iter().collect()), line: l, col });
            } else {
                return Err(ParseError::Syntax { line: l, col, message: format!("unexpected character `{c}`") });
            }
        }
    }
    Ok(out)
}

// Statements before name resolution.
#[derive(Debug, Clone)]
enum RawStmt {
    Acquire { lock: String, mode: Option<LockMode> },
    Release { lock: String },
    Access { kind: AccessKind, pointee: String, offset: u64, alias: Option<String> },
    Spawn(String),
    Join(String),
}

#[derive(Debug, Clone)]
struct Located<T> {
    item: T,
    line: usize,
    col: usize,
}

struct RawThread {
    name: String,
    body: Vec<Located<RawStmt>>,
    line: usize,
    col: usize,
}

const STATEMENT_WORDS: [&str; 6] = ["acquire", "release", "read", "write", "spawn", "join"];

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
    eof: (usize, usize),
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn here(&self) -> (usize, usize) {
        self.peek().map(|t| (t.line, t.col)).unwrap_or(self.eof)
    }

    fn error<T>(&self, message: impl Into<String>) -> Result<T, ParseError> {
        let (line, col) = self.here();
        Err(ParseError::Syntax { line, col, message: message.into() })
    }

    fn ident(&mut self, what: &str) -> Result<(String, usize, usize), ParseError> {
        match self.peek().cloned() {
            Some(Token { tok: Tok::Ident(s), line, col }) => {
                self.pos += 1;
                Ok((s, line, col))
            }
            _ => self.error(format!("expected {what}")),
        }
    }

    fn keyword(&mut self, kw: &str) -> Result<(), ParseError> {
        match self.peek() {
            Some(Token { tok: Tok::Ident(s), .. }) if s == kw => {
                self.pos += 1;
                Ok(())
            }
            _ => self.error(format!("expected `{kw}`")),
        }
    }

    fn number(&mut self) -> Result<u64, ParseError> {
        match self.peek() {
            Some(Token { tok: Tok::Number(n), .. }) => {
                let n = *n;
                self.pos += 1;
                Ok(n)
            }
            _ => self.error("expected a number"),
        }
    }

    fn eat(&mut self, tok: &Tok) -> bool {
        if self.peek().is_some_and(|t| &t.tok == tok) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn eat_keyword(&mut self, kw: &str) -> bool {
        if matches!(self.peek(), Some(Token { tok: Tok::Ident(s), .. }) if s == kw) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    // `acquire r write A` is an acquire followed by a write, so a mode word
    // only counts when the token after it cannot be a statement operand.
    fn mode_word(&self) -> Option<LockMode> {
        let mode = match self.peek() {
            Some(Token { tok: Tok::Ident(s), .. }) if s == "read" => LockMode::Reader,
            Some(Token { tok: Tok::Ident(s), .. }) if s == "write" => LockMode::Exclusive,
            _ => return None,
        };
        match self.tokens.get(self.pos + 1).map(|t| &t.tok) {
            None | Some(Tok::RBrace) => Some(mode),
            Some(Tok::Ident(s)) if STATEMENT_WORDS.contains(&s.as_str()) => Some(mode),
            _ => None,
        }
    }

    fn statement(&mut self) -> Result<Located<RawStmt>, ParseError> {
        let (word, line, col) = self.ident("a statement")?;
        let item = match word.as_str() {
            "acquire" => {
                let (lock, _, _) = self.ident("a lock name")?;
                let mode = match self.mode_word() {
                    Some(mode) => {
                        self.pos += 1;
                        Some(mode)
                    }
                    None => None,
                };
                RawStmt::Acquire { lock, mode }
            }
            "release" => RawStmt::Release { lock: self.ident("a lock name")?.0 },
            "read" | "write" => {
                let kind = if word == "read" { AccessKind::Read } else { AccessKind::Write };
                let (pointee, _, _) = self.ident("a pointee name")?;
                let offset = if self.eat(&Tok::Plus) { self.number()? } else { 0 };
                let alias = if self.eat_keyword("via") { Some(self.ident("an alias name")?.0) } else { None };
                RawStmt::Access { kind, pointee, offset, alias }
            }
            "spawn" => RawStmt::Spawn(self.ident("a thread name")?.0),
            "join" => RawStmt::Join(self.ident("a thread name")?.0),
            other => {
                return Err(ParseError::Syntax { line, col, message: format!("unknown statement `{other}`") })
            }
        };
        Ok(Located { item, line, col })
    }
}

/// Parses and validates a DSL program.
pub fn parse_program(text: &str) -> Result<Program, ParseError> {
    let tokens = tokenize(text)?;
    let eof = (text.lines().count().max(1), 1);
    let mut p = Parser { tokens, pos: 0, eof };

    let mut pointees: Vec<PointeeDecl> = Vec::new();
    let mut locks: Vec<LockDecl> = Vec::new();
    let mut raw_threads: Vec<RawThread> = Vec::new();

    while p.peek().is_some() {
        let (word, line, col) = p.ident("`pointee`, `lock` or `thread`")?;
        match word.as_str() {
            "pointee" => {
                let (name, nl, nc) = p.ident("a pointee name")?;
                p.keyword("size")?;
                let size = p.number()?;
                if pointees.iter().any(|q| q.name == name) {
                    return Err(ParseError::Duplicate { what: "pointee", name, line: nl, col: nc });
                }
                if pad_pointee(size).is_err() {
                    return Err(ParseError::InvalidAllocation { pointee: name, line: nl, col: nc });
                }
                pointees.push(PointeeDecl { name, size });
            }
            "lock" => {
                let (name, nl, nc) = p.ident("a lock name")?;
                p.keyword("kind")?;
                let kind = match p.ident("`mutex` or `rwlock`")?.0.as_str() {
                    "mutex" => LockKind::Mutex,
                    "rwlock" => LockKind::RwLock,
                    other => return p.error(format!("unknown lock kind `{other}`")),
                };
                if locks.iter().any(|l| l.name == name) {
                    return Err(ParseError::Duplicate { what: "lock", name, line: nl, col: nc });
                }
                locks.push(LockDecl { name, kind });
            }
            "thread" => {
                let (name, nl, nc) = p.ident("a thread name")?;
                if !p.eat(&Tok::LBrace) {
                    return p.error("expected `{`");
                }
                let mut body = Vec::new();
                while !p.eat(&Tok::RBrace) {
                    if p.peek().is_none() {
                        return p.error("unterminated thread block");
                    }
                    body.push(p.statement()?);
                }
                if raw_threads.iter().any(|t| t.name == name) {
                    return Err(ParseError::Duplicate { what: "thread", name, line: nl, col: nc });
                }
                raw_threads.push(RawThread { name, body, line: nl, col: nc });
            }
            other => {
                return Err(ParseError::Syntax { line, col, message: format!("unexpected `{other}`") });
            }
        }
    }

    resolve(pointees, locks, raw_threads)
}

fn resolve(
    pointees: Vec<PointeeDecl>,
    locks: Vec<LockDecl>,
    mut raw_threads: Vec<RawThread>,
) -> Result<Program, ParseError> {
    let explicit_main = raw_threads.iter().any(|t| t.name == "main");
    if !explicit_main {
        raw_threads.insert(0, RawThread { name: "main".into(), body: Vec::new(), line: 0, col: 0 });
    }
    let raw_index: HashMap<&str, usize> =
        raw_threads.iter().enumerate().map(|(i, t)| (t.name.as_str(), i)).collect();

    // Thread numbering: main is 0; children follow spawn order, breadth-first
    // from main, or declaration order when main is implicit.
    let mut order: Vec<usize> = Vec::new();
    if explicit_main {
        let mut assigned = vec![false; raw_threads.len()];
        let main = raw_index["main"];
        assigned[main] = true;
        let mut queue = VecDeque::from([main]);
        while let Some(t) = queue.pop_front() {
            order.push(t);
            for stmt in &raw_threads[t].body {
                if let RawStmt::Spawn(child) = &stmt.item {
                    let Some(&c) = raw_index.get(child.as_str()) else {
                        return Err(undeclared("thread", child, stmt));
                    };
                    if assigned[c] {
                        return Err(ParseError::ThreadStructure {
                            message: format!("thread `{child}` is spawned more than once or spawns an ancestor"),
                            line: stmt.line,
                            col: stmt.col,
                        });
                    }
                    assigned[c] = true;
                    queue.push_back(c);
                }
            }
        }
        if let Some(t) = (0..raw_threads.len()).find(|&t| !assigned[t]) {
            let t = &raw_threads[t];
            return Err(ParseError::ThreadStructure {
                message: format!("thread `{}` is never spawned", t.name),
                line: t.line,
                col: t.col,
            });
        }
    } else {
        order.extend(0..raw_threads.len());
        for t in &raw_threads {
            if let Some(s) = t.body.iter().find(|s| matches!(s.item, RawStmt::Spawn(_) | RawStmt::Join(_))) {
                return Err(ParseError::ThreadStructure {
                    message: "spawn and join statements require a `main` thread block".into(),
                    line: s.line,
                    col: s.col,
                });
            }
        }
    }
    let mut thread_ids: HashMap<&str, ThreadId> = HashMap::new();
    for (id, &raw) in order.iter().enumerate() {
        thread_ids.insert(raw_threads[raw].name.as_str(), ThreadId(id as u32));
    }

    let pointee_ids: HashMap<&str, PointeeId> =
        pointees.iter().enumerate().map(|(i, p)| (p.name.as_str(), PointeeId(i as u32))).collect();
    let lock_ids: HashMap<&str, LockId> =
        locks.iter().enumerate().map(|(i, l)| (l.name.as_str(), LockId(i as u32))).collect();
    let mut aliases: Vec<String> = Vec::new();
    let mut alias_ids: HashMap<String, AliasId> = HashMap::new();
    let mut joined: HashSet<ThreadId> = HashSet::new();

    let mut threads = Vec::with_capacity(order.len());
    for &raw in &order {
        let rt = &raw_threads[raw];
        let me = thread_ids[rt.name.as_str()];
        let mut held: BTreeMap<LockId, LockMode> = BTreeMap::new();
        let mut body = Vec::with_capacity(rt.body.len());
        for s in &rt.body {
            let stmt = match &s.item {
                RawStmt::Acquire { lock, mode } => {
                    let id = *lock_ids.get(lock.as_str()).ok_or_else(|| undeclared("lock", lock, s))?;
                    let decl = &locks[id.0 as usize];
                    let mode = match (decl.kind, mode) {
                        (LockKind::Mutex, Some(LockMode::Reader)) => {
                            return Err(ParseError::ReaderModeOnMutex { lock: lock.clone(), line: s.line, col: s.col })
                        }
                        (_, Some(m)) => *m,
                        (_, None) => LockMode::Exclusive,
                    };
                    if held.insert(id, mode).is_some() {
                        return Err(ParseError::RecursiveLock {
                            thread: rt.name.clone(),
                            lock: lock.clone(),
                            line: s.line,
                            col: s.col,
                        });
                    }
                    Stmt::Acquire { lock: id, mode }
                }
                RawStmt::Release { lock } => {
                    let id = *lock_ids.get(lock.as_str()).ok_or_else(|| undeclared("lock", lock, s))?;
                    if held.remove(&id).is_none() {
                        return Err(ParseError::UnmatchedRelease {
                            thread: rt.name.clone(),
                            lock: lock.clone(),
                            line: s.line,
                            col: s.col,
                        });
                    }
                    Stmt::Release { lock: id }
                }
                RawStmt::Access { kind, pointee, offset, alias } => {
                    let pid = *pointee_ids.get(pointee.as_str()).ok_or_else(|| undeclared("pointee", pointee, s))?;
                    let size = pointees[pid.0 as usize].size;
                    if *offset >= size {
                        return Err(ParseError::OffsetOutOfRange {
                            pointee: pointee.clone(),
                            offset: *offset,
                            size,
                            line: s.line,
                            col: s.col,
                        });
                    }
                    let alias_name = alias.clone().unwrap_or_else(|| pointee.clone());
                    let next = AliasId(aliases.len() as u32);
                    let aid = *alias_ids.entry(alias_name.clone()).or_insert_with(|| {
                        aliases.push(alias_name);
                        next
                    });
                    Stmt::Access { kind: *kind, pointee: pid, offset: *offset, alias: aid }
                }
                RawStmt::Spawn(name) => Stmt::Spawn(thread_ids[name.as_str()]),
                RawStmt::Join(name) => {
                    let t = *thread_ids.get(name.as_str()).ok_or_else(|| undeclared("thread", name, s))?;
                    if t == me || t == ThreadId::MAIN {
                        return Err(ParseError::ThreadStructure {
                            message: format!("thread `{}` cannot join `{name}`", rt.name),
                            line: s.line,
                            col: s.col,
                        });
                    }
                    if !joined.insert(t) {
                        return Err(ParseError::ThreadStructure {
                            message: format!("thread `{name}` is joined more than once"),
                            line: s.line,
                            col: s.col,
                        });
                    }
                    Stmt::Join(t)
                }
            };
            body.push(stmt);
        }
        if let Some((&lock, _)) = held.iter().next() {
            return Err(ParseError::UnmatchedAcquire {
                thread: rt.name.clone(),
                lock: locks[lock.0 as usize].name.clone(),
            });
        }
        threads.push(ThreadDecl { name: rt.name.clone(), body });
    }

    Ok(Program { pointees, locks, aliases, threads, explicit_main })
}

fn undeclared(what: &'static str, name: &str, at: &Located<RawStmt>) -> ParseError {
    ParseError::Undeclared { what, name: name.to_string(), line: at.line, col: at.col }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO_THREADS: &str = "
        # one pointee, one mutex
        pointee A size 20
        lock m kind mutex
        thread t1 {
          acquire m
          write A+16
          release m
        }
        thread t2 { acquire m read A release m }
    ";

    #[test]
    fn parses_two_thread_program() {
        let p = parse_program(TWO_THREADS).unwrap();
        assert_eq!(p.thread_count(), 3);
        assert!(!p.explicit_main);
        assert_eq!(p.thread_name(ThreadId(1)), "t1");
        assert_eq!(p.threads[1].body.len(), 3);
        assert_eq!(p.granule_count(PointeeId(0)), 2);
        assert_eq!(
            p.threads[1].body[1],
            Stmt::Access { kind: AccessKind::Write, pointee: PointeeId(0), offset: 16, alias: AliasId(0) }
        );
    }

    #[test]
    fn display_round_trips() {
        let p = parse_program(TWO_THREADS).unwrap();
        assert_eq!(parse_program(&p.to_string()).unwrap(), p);
        let explicit = "pointee A size 16\nlock r kind rwlock\nthread main { spawn w write A join w }\n\
                        thread w { acquire r read read A via q release r }";
        let p = parse_program(explicit).unwrap();
        assert_eq!(parse_program(&p.to_string()).unwrap(), p);
    }

    #[test]
    fn offset_out_of_range() {
        let err = parse_program("pointee A size 32\nthread t { write A+64 }").unwrap_err();
        assert!(matches!(err, ParseError::OffsetOutOfRange { offset: 64, size: 32, line: 2, .. }), "{err}");
    }

    #[test]
    fn unmatched_release_and_acquire() {
        let err = parse_program("lock m kind mutex\nthread t { release m }").unwrap_err();
        assert!(matches!(err, ParseError::UnmatchedRelease { .. }), "{err}");
        let err = parse_program("lock m kind mutex\nthread t { acquire m }").unwrap_err();
        assert!(matches!(err, ParseError::UnmatchedAcquire { .. }), "{err}");
        let err = parse_program("lock m kind mutex\nthread t { acquire m acquire m release m }").unwrap_err();
        assert!(matches!(err, ParseError::RecursiveLock { .. }), "{err}");
    }

    #[test]
    fn syntax_errors_carry_positions() {
        let err = parse_program("pointee A size 16\nthread t {\n  wrte A\n}").unwrap_err();
        assert_eq!(err, ParseError::Syntax { line: 3, col: 3, message: "unknown statement `wrte`".into() });
        let err = parse_program("pointee A size $").unwrap_err();
        assert!(matches!(err, ParseError::Syntax { line: 1, col: 16, .. }), "{err}");
        let err = parse_program("thread t { read B }").unwrap_err();
        assert!(matches!(err, ParseError::Undeclared { what: "pointee", .. }), "{err}");
    }

    #[test]
    fn rwlock_modes() {
        let p = parse_program("lock r kind rwlock\nlock m kind mutex\nthread t { acquire r release r acquire r read release r }")
            .unwrap();
        let body = &p.threads[1].body;
        assert_eq!(body[0], Stmt::Acquire { lock: LockId(0), mode: LockMode::Exclusive });
        assert_eq!(body[2], Stmt::Acquire { lock: LockId(0), mode: LockMode::Reader });
        let err = parse_program("lock m kind mutex\nthread t { acquire m read release m }").unwrap_err();
        assert!(matches!(err, ParseError::ReaderModeOnMutex { .. }));
    }

    #[test]
    fn explicit_main_numbers_threads_in_spawn_order() {
        let p = parse_program(
            "thread b { }\nthread a { spawn b join b }\nthread main { spawn a join a }",
        )
        .unwrap();
        assert!(p.explicit_main);
        let names: Vec<_> = p.threads.iter().map(|t| t.name.as_str()).collect();
        assert_eq!(names, ["main", "a", "b"]);
        let err = parse_program("thread a { }\nthread main { }").unwrap_err();
        assert!(matches!(err, ParseError::ThreadStructure { .. }));
        let err = parse_program("thread a { spawn a }").unwrap_err();
        assert!(matches!(err, ParseError::ThreadStructure { .. }));
    }

    #[test]
    fn zero_sized_pointee_is_rejected() {
        let err = parse_program("pointee A size 0").unwrap_err();
        assert!(matches!(err, ParseError::InvalidAllocation { .. }));
    }
}
