use async_trait::async_trait;

use super::{ChatMessage, ChatProvider, FragmentStream, ProviderError, ResultPage, SearchProvider, SearchResult};

pub const DEFAULT_CORPUS: &str = include_str!("default_corpus.tsv");

/// Replies `echo: <last prompt>` split into `chunk_chars`-character
/// fragments. With `fail_after_chunks` set, the stream errors after that
/// many fragments.
#[derive(Debug, Clone)]
pub struct MockEcho {
    pub chunk_chars: usize,
    pub fail_after_chunks: Option<usize>,
}

impl MockEcho {
    pub fn reply(history: &[ChatMessage]) -> String {
        format!("echo: {}", history.last().map_or("", |m| m.text.as_str()))
    }

    pub fn fragments(&self, history: &[ChatMessage]) -> Vec<String> {
        let chars: Vec<char> = Self::reply(history).chars().collect();
        chars.chunks(self.chunk_chars.max(1)).map(|c| c.iter().collect()).collect()
    }
}

#[async_trait]
impl ChatProvider for MockEcho {
    async fn stream(&self, history: &[ChatMessage]) -> Result<FragmentStream, ProviderError> {
        let mut items: Vec<Result<String, ProviderError>> = self.fragments(history).into_iter().map(Ok).collect();
        if let Some(n) = self.fail_after_chunks {
            if n < items.len() {
                items.truncate(n);
                items.push(Err(ProviderError::Unavailable(format!("connection dropped after {n} chunks"))));
            }
        }
        Ok(Box::pin(futures::stream::iter(items)))
    }

    async fn probe(&self) -> Result<(), ProviderError> {
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusDoc {
    pub id: String,
    pub title: String,
    pub url: String,
    pub body: String,
    pub score: f64,
}

/// Parses tab-separated fixtures: `id, title, url, body, score` per line.
/// Blank lines and lines starting with `#` are skipped.
pub fn parse_corpus(text: &str) -> Result<Vec<CorpusDoc>, String> {
    let mut docs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [id, title, url, body, score] = fields[..] else {
            return Err(format!("line {}: expected 5 tab-separated fields, got {}", n + 1, fields.len()));
        };
        let score = score.trim().parse::<f64>().map_err(|e| format!("line {}: score: {e}", n + 1))?;
        if url::Url::parse(url).is_err() {
            return Err(format!("line {}: invalid url {url:?}", n + 1));
        }
        docs.push(CorpusDoc { id: id.into(), title: title.into(), url: url.into(), body: body.into(), score });
    }
    Ok(docs)
}

fn terms(s: &str) -> Vec<String> {
    s.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).map(str::to_lowercase).collect()
}

/// Fixed-corpus search: a document matches when any query term occurs in
/// its title or body; matches are ranked by score, ties by id.
#[derive(Debug, Clone)]
pub struct MockCorpus {
    docs: Vec<(CorpusDoc, Vec<String>)>,
    limit: usize,
}

impl MockCorpus {
    pub fn new(docs: Vec<CorpusDoc>, limit: usize) -> Self {
        let docs = docs
            .into_iter()
            .map(|d| {
                let t = terms(&format!("{} {}", d.title, d.body));
                (d, t)
            })
            .collect();
        Self { docs, limit }
    }

    pub fn lookup(&self, query: &str) -> ResultPage {
        let q = terms(query);
        let mut hits: Vec<&CorpusDoc> =
            self.docs.iter().filter(|(_, t)| q.iter().any(|w| t.contains(w))).map(|(d, _)| d).collect();
        hits.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.id.cmp(&b.id)));
        let results = hits
            .into_iter()
            .take(self.limit)
            .enumerate()
            .map(|(i, d)| SearchResult {
                rank: i as u32 + 1,
                title: d.title.clone(),
                url: d.url.clone(),
                snippet: d.body.chars().take(160).collect(),
            })
            .collect();
        ResultPage { query_text: query.to_string(), results }
    }
}

#[async_trait]
impl SearchProvider for MockCorpus {
    async fn search(&self, query: &str) -> Result<ResultPage, ProviderError> {
        if query.trim().is_empty() {
            return Err(ProviderError::InvalidRequest("empty query".into()));
        }
        Ok(self.lookup(query))
    }

    async fn probe(&self) -> Result<(), ProviderError> {
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIXTURE: &str = "# id\ttitle\turl\tbody\tscore\n\
        a\tApple pie\thttps://a.example/\tbaking apples\t0.5\n\
        b\tApple juice\thttps://b.example/\tpressing apples\t0.9\n\
        c\tPear tart\thttps://c.example/\tpears only\t0.7\n\
        d\tApple cider\thttps://d.example/\tfermented apples\t0.2\n\
        e\tGreen apple\thttps://e.example/\tsour\t0.9\n";

    #[test]
    fn matches_ranked_by_score() {
        let m = MockCorpus::new(parse_corpus(FIXTURE).unwrap(), 10);
        let page = m.lookup("apple");
        let urls: Vec<&str> = page.results.iter().map(|r| r.url.as_str()).collect();
        assert_eq!(urls, ["https://b.example/", "https://e.example/", "https://a.example/", "https://d.example/"]);
        assert!(page.results.iter().enumerate().all(|(i, r)| r.rank as usize == i + 1));
    }

    #[test]
    fn limit_keeps_top_scores() {
        let m = MockCorpus::new(parse_corpus(FIXTURE).unwrap(), 2);
        let page = m.lookup("Apple");
        assert_eq!(page.results.len(), 2);
        assert_eq!(page.results[0].url, "https://b.example/");
        assert_eq!(page.results[1].url, "https://e.example/");
    }

    #[test]
    fn no_match_is_empty_page() {
        let m = MockCorpus::new(parse_corpus(FIXTURE).unwrap(), 10);
        assert!(m.lookup("zebra").is_empty());
    }

    #[test]
    fn bad_fixture_lines() {
        assert!(parse_corpus("a\tb\tc").is_err());
        assert!(parse_corpus("a\tt\tnot a url\tbody\t1").is_err());
        assert!(parse_corpus("a\tt\thttps://x.example/\tbody\tlots").is_err());
    }

    #[test]
    fn builtin_corpus_parses() {
        let docs = parse_corpus(DEFAULT_CORPUS).unwrap();
        assert!(docs.len() >= 10);
    }

    #[test]
    fn echo_fragments_join_to_reply() {
        let e = MockEcho { chunk_chars: 3, fail_after_chunks: None };
        let h = [ChatMessage::user("héllo wörld")];
        assert_eq!(e.fragments(&h).concat(), "echo: héllo wörld");
        assert!(e.fragments(&h).iter().all(|f| f.chars().count() <= 3));
    }
}
