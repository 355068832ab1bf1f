use std::collections::HashMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Partition index per state instance; `None` marks an ignored instance.
///
/// Terminal instances all share `terminal_partition`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    labels: Vec<Option<usize>>,
    partition_count: usize,
    terminal_partition: Option<usize>,
}

impl ClusterAssignment {
    pub fn new(labels: Vec<Option<usize>>, partition_count: usize, terminal_partition: Option<usize>) -> Result<Self> {
        if let Some(bad) = labels.iter().flatten().find(|&&p| p >= partition_count) {
            return Err(Error::InvalidArgument(format!(
                "partition {bad} is not below partition_count {partition_count}"
            )));
        }
        if let Some(t) = terminal_partition {
            if t >= partition_count {
                return Err(Error::InvalidArgument(format!("terminal partition {t} out of range")));
            }
        }
        Ok(ClusterAssignment {
            labels,
            partition_count,
            terminal_partition,
        })
    }

    /// A total assignment with `partition_count` one past the largest label.
    pub fn from_labels(labels: Vec<usize>, terminal_partition: Option<usize>) -> Result<Self> {
        let count = labels.iter().max().map_or(0, |m| m + 1);
        Self::new(labels.into_iter().map(Some).collect(), count, terminal_partition)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn partition_count(&self) -> usize {
        self.partition_count
    }

    pub fn terminal_partition(&self) -> Option<usize> {
        self.terminal_partition
    }

    pub fn partition(&self, instance: usize) -> Option<usize> {
        self.labels[instance]
    }

    pub fn labels(&self) -> &[Option<usize>] {
        &self.labels
    }

    pub fn is_ignored(&self, instance: usize) -> bool {
        self.labels[instance].is_none()
    }

    pub fn ignored_count(&self) -> usize {
        self.labels.iter().filter(|l| l.is_none()).count()
    }

    /// Instances of every partition, each list in increasing id order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.partition_count];
        for (i, l) in self.labels.iter().enumerate() {
            if let Some(p) = l {
                out[*p].push(i);
            }
        }
        out
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut out = vec![0; self.partition_count];
        for p in self.labels.iter().flatten() {
            out[*p] += 1;
        }
        out
    }

    /// Partition count excluding the terminal partition.
    pub fn non_terminal_count(&self) -> usize {
        self.partition_count - usize::from(self.terminal_partition.is_some())
    }

    /// True if both describe the same set partition and ignore the same
    /// instances, regardless of index labels.
    pub fn same_partition(&self, other: &ClusterAssignment) -> bool {
        if self.len() != other.len() {
            return false;
        }
        let mut forward: HashMap<usize, usize> = HashMap::new();
        let mut backward: HashMap<usize, usize> = HashMap::new();
        for (a, b) in self.labels.iter().zip(&other.labels) {
            match (a, b) {
                (None, None) => {}
                (Some(a), Some(b)) => {
                    if *forward.entry(*a).or_insert(*b) != *b || *backward.entry(*b).or_insert(*a) != *a {
                        return false;
                    }
                }
                _ => return false,
            }
        }
        true
    }

    /// Writes `instance_id,partition,ignored`; ignored rows leave the partition empty.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["instance_id", "partition", "ignored"])?;
        for (i, l) in self.labels.iter().enumerate() {
            w.write_record([
                i.to_string(),
                l.map_or(String::new(), |p| p.to_string()),
                u8::from(l.is_none()).to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<assignment writer>", e))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R, terminal_partition: Option<usize>) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let mut labels = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let bad = || Error::Dataset(format!("assignment row {}: malformed", line + 1));
            let id: usize = rec.get(0).ok_or_else(bad)?.parse().map_err(|_| bad())?;
            if id != labels.len() {
                return Err(bad());
            }
            let p = rec.get(1).ok_or_else(bad)?;
            labels.push(if p.is_empty() { None } else { Some(p.parse().map_err(|_| bad())?) });
        }
        let count = labels.iter().flatten().max().map_or(0, |m| m + 1);
        let count = count.max(terminal_partition.map_or(0, |t| t + 1));
        Self::new(labels, count, terminal_partition)
    }
}
