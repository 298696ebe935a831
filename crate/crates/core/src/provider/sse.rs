//! Minimal server-sent-events decoder for vendor streaming APIs.

use futures::{Stream, StreamExt};

use super::ProviderError;

/// Incremental decoder. Feed raw bytes, take complete events' `data`.
#[derive(Debug, Default)]
pub struct SseDecoder {
    buf: Vec<u8>,
    data: Vec<String>,
}

impl SseDecoder {
    /// Returns the data payloads of every event completed by `bytes`.
    pub fn feed(&mut self, bytes: &[u8]) -> Vec<String> {
        self.buf.extend_from_slice(bytes);
        let mut out = Vec::new();
        while let Some(pos) = self.buf.iter().position(|&b| b == b'\n') {
            let mut line: Vec<u8> = self.buf.drain(..=pos).collect();
            line.pop();
            if line.last() == Some(&b'\r') {
                line.pop();
            }
            let line = String::from_utf8_lossy(&line);
            if line.is_empty() {
                if !self.data.is_empty() {
                    out.push(std::mem::take(&mut self.data).join("\n"));
                }
            } else if let Some(rest) = line.strip_prefix("data:") {
                self.data.push(rest.strip_prefix(' ').unwrap_or(rest).to_string());
            }
            // event:, id:, retry: and comments carry nothing we use
        }
        out
    }

    /// Data of a final event that was not followed by a blank line.
    pub fn finish(&mut self) -> Option<String> {
        if !self.buf.is_empty() {
            let rest = std::mem::take(&mut self.buf);
            self.feed(&rest);
            self.feed(b"\n");
        }
        (!self.data.is_empty()).then(|| std::mem::take(&mut self.data).join("\n"))
    }
}

/// Turns a byte stream into a stream of event data payloads.
pub fn events<S, B, E>(body: S) -> impl Stream<Item = Result<String, ProviderError>> + Send
where
    S: Stream<Item = Result<B, E>> + Send + Unpin + 'static,
    B: AsRef<[u8]>,
    E: std::fmt::Display,
{
    let state = (body, SseDecoder::default(), std::collections::VecDeque::new(), false);
    futures::stream::unfold(state, |(mut body, mut dec, mut queue, mut ended)| async move {
        loop {
            if let Some(item) = queue.pop_front() {
                return Some((Ok(item), (body, dec, queue, ended)));
            }
            if ended {
                return None;
            }
            match body.next().await {
                Some(Ok(bytes)) => queue.extend(dec.feed(bytes.as_ref())),
                Some(Err(e)) => {
                    ended = true;
                    return Some((Err(ProviderError::Unavailable(e.to_string())), (body, dec, queue, ended)));
                }
                None => {
                    ended = true;
                    queue.extend(dec.finish());
                }
            }
        }
    })
}
