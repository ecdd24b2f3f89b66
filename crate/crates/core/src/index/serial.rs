//! On-disk index format.
//!
//! Header (magic, version, metric, dim, M), a node section with id-ordered
//! fixed-stride payloads, an adjacency section with delta-encoded varint
//! neighbor ids, and a 64-bit checksum trailer. Node slots are remapped to
//! lexicographic id order on write, so the payload stride and the delta
//! encoding are both well defined.

use std::collections::HashMap;

use super::{
    AdjacencyEntry, FusionIndex, IndexError, IndexParams, LabelBits, LabelDict, Metric, NodeData,
    PartitionKey,
};
use crate::util::{read_varint, write_varint, Fnv64};

const MAGIC: &[u8; 4] = b"AXFI";
const VERSION: u16 = 1;

impl FusionIndex {
    pub fn serialize(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(match self.params.metric {
            Metric::Cosine => 0,
            Metric::Euclidean => 1,
        });
        let dim = self.dim.unwrap_or(0);
        out.extend_from_slice(&(dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.params.max_degree as u32).to_le_bytes());
        out.extend_from_slice(&(self.params.ef_construction as u32).to_le_bytes());
        out.extend_from_slice(&self.params.layer_decay.to_le_bytes());
        out.extend_from_slice(&self.params.seed.to_le_bytes());
        write_bytes(&mut out, self.params.partition.tenant.as_bytes());
        out.extend_from_slice(&self.params.partition.bucket.to_le_bytes());

        write_varint(self.dict.len() as u64, &mut out);
        for name in self.dict.names() {
            write_bytes(&mut out, name.as_bytes());
        }
        let word_count = self.dict.len().div_ceil(64);

        // Remap slots to lexicographic id order.
        let mut order: Vec<u32> = (0..self.nodes.len() as u32).collect();
        order.sort_by(|&a, &b| self.nodes[a as usize].id.cmp(&self.nodes[b as usize].id));
        let mut remap = vec![0u32; self.nodes.len()];
        for (new, &old) in order.iter().enumerate() {
            remap[old as usize] = new as u32;
        }

        write_varint(self.nodes.len() as u64, &mut out);
        for &old in &order {
            write_bytes(&mut out, self.nodes[old as usize].id.as_bytes());
        }
        // Fixed-stride payloads in id order.
        for &old in &order {
            let n = &self.nodes[old as usize];
            out.extend_from_slice(&n.attr.to_le_bytes());
            out.push(n.level);
            out.push(n.dead as u8);
            write_words(&mut out, &n.labels, word_count);
            for x in &n.embedding {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        // Adjacency: per node, per layer, delta-encoded sorted neighbor ids
        // followed by the entry metadata copies.
        for &old in &order {
            let n = &self.nodes[old as usize];
            for layer in &n.layers {
                let mut entries: Vec<(u32, &AdjacencyEntry)> = layer
                    .iter()
                    .map(|e| (remap[e.neighbor as usize], e))
                    .collect();
                entries.sort_by_key(|(id, _)| *id);
                write_varint(entries.len() as u64, &mut out);
                let mut prev = 0u64;
                for (i, (id, _)) in entries.iter().enumerate() {
                    let id = *id as u64;
                    if i == 0 {
                        write_varint(id, &mut out);
                    } else {
                        write_varint(id - prev, &mut out);
                    }
                    prev = id;
                }
                for (_, e) in &entries {
                    out.extend_from_slice(&e.attr.to_le_bytes());
                    write_words(&mut out, &e.labels, word_count);
                    out.extend_from_slice(&e.distance.to_le_bytes());
                }
            }
        }
        let entry = self.entry.map(|e| remap[e as usize]).unwrap_or(u32::MAX);
        out.extend_from_slice(&entry.to_le_bytes());

        let mut h = Fnv64::new();
        h.update(&out);
        out.extend_from_slice(&h.finish().to_le_bytes());
        out
    }

    pub fn deserialize(bytes: &[u8]) -> Result<FusionIndex, IndexError> {
        if bytes.len() < MAGIC.len() + 2 + 8 {
            return Err(IndexError::Corrupt("stream too short".into()));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 8);
        let mut h = Fnv64::new();
        h.update(body);
        let stored = u64::from_le_bytes(trailer.try_into().unwrap());
        if h.finish() != stored {
            return Err(IndexError::Corrupt("checksum mismatch".into()));
        }

        let mut r = Reader { buf: body, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(IndexError::Corrupt("bad magic".into()));
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
        if version != VERSION {
            return Err(IndexError::Corrupt(format!("unsupported version {version}")));
        }
        let metric = match r.take(1)?[0] {
            0 => Metric::Cosine,
            1 => Metric::Euclidean,
            m => return Err(IndexError::Corrupt(format!("unknown metric {m}"))),
        };
        let dim = u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize;
        let max_degree = u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize;
        let ef_construction = u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize;
        let layer_decay = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let seed = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let tenant = r.take_string()?;
        let bucket = i64::from_le_bytes(r.take(8)?.try_into().unwrap());

        let params = IndexParams {
            metric,
            max_degree,
            ef_construction,
            layer_decay,
            partition: PartitionKey { tenant, bucket },
            seed,
        };
        params
            .validate()
            .map_err(|e| IndexError::Corrupt(format!("bad params: {e}")))?;

        let dict_len = r.varint()? as usize;
        let mut dict = LabelDict::default();
        for _ in 0..dict_len {
            let name = r.take_string()?;
            dict.intern(&name);
        }
        let word_count = dict_len.div_ceil(64);

        let node_count = r.varint()? as usize;
        let mut ids = Vec::with_capacity(node_count);
        for _ in 0..node_count {
            ids.push(r.take_string()?);
        }
        let mut nodes: Vec<NodeData> = Vec::with_capacity(node_count);
        let mut live = 0usize;
        for id in &ids {
            let attr = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
            let level = r.take(1)?[0];
            let dead = r.take(1)?[0] != 0;
            let labels = r.take_words(word_count)?;
            let mut embedding = Vec::with_capacity(dim);
            for _ in 0..dim {
                embedding.push(f32::from_le_bytes(r.take(4)?.try_into().unwrap()));
            }
            if !dead {
                live += 1;
            }
            nodes.push(NodeData {
                id: id.clone(),
                embedding,
                attr,
                labels,
                level,
                dead,
                layers: vec![Vec::new(); level as usize + 1],
            });
        }
        for node in nodes.iter_mut() {
            for layer_idx in 0..=(node.level as usize) {
                let count = r.varint()? as usize;
                let mut neighbor_ids = Vec::with_capacity(count);
                let mut prev = 0u64;
                for i in 0..count {
                    let v = r.varint()?;
                    let id = if i == 0 { v } else { prev + v };
                    prev = id;
                    if id as usize >= node_count {
                        return Err(IndexError::Corrupt("neighbor id out of range".into()));
                    }
                    neighbor_ids.push(id as u32);
                }
                let mut entries = Vec::with_capacity(count);
                for nid in neighbor_ids {
                    let attr = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
                    let labels = r.take_words(word_count)?;
                    let distance = f32::from_le_bytes(r.take(4)?.try_into().unwrap());
                    entries.push(AdjacencyEntry {
                        neighbor: nid,
                        attr,
                        labels,
                        distance,
                    });
                }
                node.layers[layer_idx] = entries;
            }
        }
        let entry_raw = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        let entry = if entry_raw == u32::MAX {
            None
        } else if (entry_raw as usize) < node_count {
            Some(entry_raw)
        } else {
            return Err(IndexError::Corrupt("entry point out of range".into()));
        };
        if r.pos != body.len() {
            return Err(IndexError::Corrupt("trailing bytes".into()));
        }

        let by_id: HashMap<String, u32> = nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.id.clone(), i as u32))
            .collect();
        let mut attr_dir: Vec<u32> = (0..nodes.len() as u32).collect();
        attr_dir.sort_by(|&a, &b| {
            let na = &nodes[a as usize];
            let nb = &nodes[b as usize];
            na.attr.total_cmp(&nb.attr).then_with(|| na.id.cmp(&nb.id))
        });
        let max_level = entry
            .map(|e| nodes[e as usize].level as usize)
            .unwrap_or(0);
        Ok(FusionIndex {
            params,
            dim: if dim == 0 && nodes.is_empty() { None } else { Some(dim) },
            nodes,
            by_id,
            entry,
            max_level,
            dict,
            live,
            attr_dir,
            span_cache: std::sync::RwLock::new(None),
        })
    }
}

fn write_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    write_varint(bytes.len() as u64, out);
    out.extend_from_slice(bytes);
}

fn write_words(out: &mut Vec<u8>, bits: &LabelBits, word_count: usize) {
    let words = bits.words();
    for i in 0..word_count {
        let w = words.get(i).copied().unwrap_or(0);
        out.extend_from_slice(&w.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], IndexError> {
        if self.pos + n > self.buf.len() {
            return Err(IndexError::Corrupt("truncated stream".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn varint(&mut self) -> Result<u64, IndexError> {
        read_varint(self.buf, &mut self.pos)
            .ok_or_else(|| IndexError::Corrupt("truncated varint".into()))
    }

    fn take_string(&mut self) -> Result<String, IndexError> {
        let len = self.varint()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| IndexError::Corrupt("invalid utf-8".into()))
    }

    fn take_words(&mut self, word_count: usize) -> Result<LabelBits, IndexError> {
        let mut words = Vec::with_capacity(word_count);
        for _ in 0..word_count {
            words.push(u64::from_le_bytes(self.take(8)?.try_into().unwrap()));
        }
        Ok(LabelBits::from_words(words))
    }
}

#[cfg(test)]
mod tests {
    use super::super::{FusionIndex, IndexError, IndexNode, IndexParams};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_unit(rng: &mut StdRng, dim: usize) -> Vec<f32> {
        let v: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let norm: f32 = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        v.iter().map(|x| x / norm.max(1e-6)).collect()
    }

    #[test]
    fn round_trip_empty() {
        let index = FusionIndex::new(IndexParams::default()).unwrap();
        let bytes = index.serialize();
        let loaded = FusionIndex::deserialize(&bytes).unwrap();
        assert!(loaded.is_empty());
        assert!(loaded.entry_id().is_none());
    }

    #[test]
    fn round_trip_preserves_search_results() {
        let mut rng = StdRng::seed_from_u64(4);
        let dim = 8;
        let labels = ["a", "b", "c"];
        let nodes: Vec<IndexNode> = (0..1000)
            .map(|i| {
                let ls: Vec<String> = labels
                    .iter()
                    .filter(|_| rng.random_range(0.0..1.0) < 0.4)
                    .map(|s| s.to_string())
                    .collect();
                IndexNode::new(
                    format!("n{i:04}"),
                    random_unit(&mut rng, dim),
                    rng.random_range(0.0..10.0),
                )
                .with_labels(ls)
            })
            .collect();
        let mut index = FusionIndex::new(IndexParams::default()).unwrap();
        index.build(nodes).unwrap();

        let bytes = index.serialize();
        let loaded = FusionIndex::deserialize(&bytes).unwrap();
        assert_eq!(loaded.len(), index.len());

        for _ in 0..20 {
            let q = random_unit(&mut rng, dim);
            let (a, _) = index.knn(&q, 10, 64).unwrap();
            let (b, _) = loaded.knn(&q, 10, 64).unwrap();
            assert_eq!(a, b);
        }
        assert!(loaded.metadata_coherent());
    }

    #[test]
    fn flipped_byte_fails_checksum() {
        let mut index = FusionIndex::new(IndexParams::default()).unwrap();
        index
            .insert(IndexNode::new("a", vec![1.0, 0.0], 1.0))
            .unwrap();
        let mut bytes = index.serialize();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(
            FusionIndex::deserialize(&bytes),
            Err(IndexError::Corrupt(_))
        ));
    }
}
