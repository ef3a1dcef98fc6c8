//! Adaptive pairwise depth annotation.
//!
//! Joints are inserted one at a time into an ordered list of equivalence
//! classes (front = closest) by binary search, each probe asking how a class
//! representative compares with the joint being placed. "Same" answers merge
//! classes, which keeps the question count well under the exhaustive
//! `C(N, 2)`.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Skeleton;
use crate::supervision::{OrdinalRelation, Relation, RelationSet};

/// Reply to "is joint `i` closer to the camera than joint `j`?".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Answer {
    Closer,
    Farther,
    Same,
    Ambiguous,
}

impl Answer {
    pub const ALL: [Answer; 4] = [Answer::Closer, Answer::Farther, Answer::Same, Answer::Ambiguous];

    pub fn as_str(self) -> &'static str {
        match self {
            Answer::Closer => "closer",
            Answer::Farther => "farther",
            Answer::Same => "same",
            Answer::Ambiguous => "ambiguous",
        }
    }
}

impl fmt::Display for Answer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Answer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Answer::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown answer {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SessionStatus {
    InProgress,
    Complete,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoggedAnswer {
    pub i: usize,
    pub j: usize,
    pub answer: Answer,
}

/// Binary-search window over class positions for the pending joint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchState {
    pub lo: usize,
    pub hi: usize,
    /// Set after an "ambiguous" answer: the alternate member being asked.
    pub retry_with: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSession {
    pub item_id: String,
    pub joint_count: usize,
    pub insertion_order: Vec<usize>,
    /// Front = closest. Members are kept in placement order; the first
    /// member is the representative.
    pub classes: Vec<Vec<usize>>,
    /// Joints merged into their class by a soft tie.
    pub flagged: Vec<usize>,
    pub pending_joint: Option<usize>,
    pub search: Option<SearchState>,
    pub answer_log: Vec<LoggedAnswer>,
    pub question_count: usize,
    pub status: SessionStatus,
}

/// Joint order with the skeleton root first, then breadth-first outward.
pub fn root_outward_order(skeleton: &Skeleton) -> Vec<usize> {
    skeleton.root_outward_order()
}

/// Seeded permutation of `0..n`, for cost studies.
pub fn shuffled_order(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

impl AnnotationSession {
    /// Session inserting joints in index order.
    pub fn new(item_id: impl Into<String>, joint_count: usize) -> Result<Self> {
        Self::with_order(item_id, (0..joint_count).collect())
    }

    pub fn for_skeleton(item_id: impl Into<String>, skeleton: &Skeleton) -> Result<Self> {
        Self::with_order(item_id, root_outward_order(skeleton))
    }

    pub fn with_order(item_id: impl Into<String>, order: Vec<usize>) -> Result<Self> {
        let n = order.len();
        if n == 0 {
            return Err(Error::InvalidInput("session needs at least one joint".into()));
        }
        let mut seen = vec![false; n];
        for &j in &order {
            if j >= n || std::mem::replace(&mut seen[j], true) {
                return Err(Error::InvalidInput(format!("insertion order is not a permutation of 0..{n}")));
            }
        }
        let mut session = AnnotationSession {
            item_id: item_id.into(),
            joint_count: n,
            classes: vec![vec![order[0]]],
            insertion_order: order,
            flagged: Vec::new(),
            pending_joint: None,
            search: None,
            answer_log: Vec::new(),
            question_count: 0,
            status: SessionStatus::InProgress,
        };
        session.advance();
        Ok(session)
    }

    pub fn is_complete(&self) -> bool {
        self.status == SessionStatus::Complete
    }

    fn placed(&self) -> usize {
        self.classes.iter().map(Vec::len).sum()
    }

    /// Moves to the next unplaced joint, or completes the session.
    fn advance(&mut self) {
        let placed = self.placed();
        if placed == self.joint_count {
            self.pending_joint = None;
            self.search = None;
            self.status = SessionStatus::Complete;
        } else {
            self.pending_joint = Some(self.insertion_order[placed]);
            self.search = Some(SearchState {
                lo: 0,
                hi: self.classes.len(),
                retry_with: None,
            });
        }
    }

    fn probe(&self) -> Option<(usize, usize, usize)> {
        let pending = self.pending_joint?;
        let s = self.search?;
        let mid = (s.lo + s.hi) / 2;
        let rep = s.retry_with.unwrap_or(self.classes[mid][0]);
        Some((mid, rep, pending))
    }

    /// Next pair `(i, j)` to ask about, or `None` once complete. Pure in the
    /// session state.
    pub fn next_question(&self) -> Option<(usize, usize)> {
        self.probe().map(|(_, rep, pending)| (rep, pending))
    }

    /// Applies an answer to the pending question. Answers describe `i`
    /// relative to `j` as returned by [`next_question`](Self::next_question).
    pub fn submit_answer(&mut self, answer: Answer) -> Result<()> {
        let (mid, rep, pending) = self
            .probe()
            .ok_or_else(|| Error::Protocol("no question is pending".into()))?;
        let mut s = self.search.expect("probe implies search state");
        self.answer_log.push(LoggedAnswer { i: rep, j: pending, answer });
        self.question_count += 1;
        match answer {
            Answer::Same => return Ok(self.merge(mid, pending, false)),
            Answer::Closer => s.lo = mid + 1,
            Answer::Farther => s.hi = mid,
            Answer::Ambiguous => {
                let alternate = match s.retry_with {
                    Some(_) => None,
                    None => self.classes[mid]
                        .iter()
                        .copied()
                        .find(|&m| m != rep && !self.flagged.contains(&m)),
                };
                match alternate {
                    Some(m) => {
                        s.retry_with = Some(m);
                        self.search = Some(s);
                        return Ok(());
                    }
                    None => return Ok(self.merge(mid, pending, true)),
                }
            }
        }
        s.retry_with = None;
        if s.lo == s.hi {
            self.classes.insert(s.lo, vec![pending]);
            self.advance();
        } else {
            self.search = Some(s);
        }
        Ok(())
    }

    fn merge(&mut self, class: usize, joint: usize, soft: bool) {
        self.classes[class].push(joint);
        if soft {
            self.flagged.push(joint);
        }
        self.advance();
    }

    /// Classes closest first, members sorted by index.
    pub fn final_ordering(&self) -> Result<Vec<Vec<usize>>> {
        if !self.is_complete() {
            return Err(Error::Contract(format!(
                "session {} is still in progress",
                self.item_id
            )));
        }
        Ok(self
            .classes
            .iter()
            .map(|c| {
                let mut c = c.clone();
                c.sort_unstable();
                c
            })
            .collect())
    }

    /// Relations implied by the final ordering, omitting pairs tied only by
    /// an ambiguous answer.
    pub fn relations(&self) -> Result<RelationSet> {
        self.relations_with(false)
    }

    pub fn relations_with(&self, include_soft_ties: bool) -> Result<RelationSet> {
        let classes = self.final_ordering()?;
        let all = ordering_to_relations(&classes)?;
        if include_soft_ties || self.flagged.is_empty() {
            return Ok(all);
        }
        let class_of = class_index(&classes, self.joint_count);
        let kept = all
            .pairs()
            .iter()
            .filter(|p| {
                let soft = self.flagged.contains(&p.i) || self.flagged.contains(&p.j);
                !(soft && class_of[p.i] == class_of[p.j])
            })
            .copied()
            .collect();
        Ok(RelationSet::from_unique(kept))
    }

    /// Replays a logged answer sequence onto a fresh session with the same
    /// insertion order.
    pub fn replay(item_id: impl Into<String>, order: Vec<usize>, answers: &[Answer]) -> Result<Self> {
        let mut s = Self::with_order(item_id, order)?;
        for &a in answers {
            s.submit_answer(a)?;
        }
        Ok(s)
    }

    /// Runs the session to completion against an answering function.
    pub fn drive<F>(&mut self, mut oracle: F) -> Result<()>
    where
        F: FnMut(usize, usize) -> Result<Answer>,
    {
        while let Some((i, j)) = self.next_question() {
            let a = oracle(i, j)?;
            self.submit_answer(a)?;
        }
        Ok(())
    }
}

fn class_index(classes: &[Vec<usize>], n: usize) -> Vec<usize> {
    let mut out = vec![usize::MAX; n];
    for (c, members) in classes.iter().enumerate() {
        for &m in members {
            out[m] = c;
        }
    }
    out
}

/// All pairwise relations implied by an ordered partition: ties within a
/// class, strict order across classes. Pairs are emitted as `(i, j)` with
/// `i < j`.
pub fn ordering_to_relations(classes: &[Vec<usize>]) -> Result<RelationSet> {
    let n = classes.iter().flatten().map(|&j| j + 1).max().unwrap_or(0);
    let mut class_of = vec![None; n];
    for (c, members) in classes.iter().enumerate() {
        for &m in members {
            if class_of[m].replace(c).is_some() {
                return Err(Error::InvalidInput(format!("joint {m} appears in two classes")));
            }
        }
    }
    let mut pairs = Vec::new();
    for i in 0..n {
        let Some(ci) = class_of[i] else { continue };
        for j in i + 1..n {
            let Some(cj) = class_of[j] else { continue };
            let r = match ci.cmp(&cj) {
                std::cmp::Ordering::Less => Relation::Closer,
                std::cmp::Ordering::Greater => Relation::Farther,
                std::cmp::Ordering::Equal => Relation::Same,
            };
            pairs.push(OrdinalRelation { i, j, r });
        }
    }
    Ok(RelationSet::from_unique(pairs))
}

/// A triple of joints whose relations cannot come from any depth ordering.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Inconsistency {
    pub a: usize,
    pub b: usize,
    pub c: usize,
}

/// Brute-force check that a relation set is a valid preorder over the pairs
/// it mentions: for every triple with all three relations present,
/// `a ≤ b` and `b ≤ c` imply `a ≤ c`, strictly if either premise is strict.
pub fn check_transitivity(rels: &RelationSet) -> std::result::Result<(), Inconsistency> {
    let n = rels.pairs().iter().map(|p| p.i.max(p.j) + 1).max().unwrap_or(0);
    // m[a][b] = Some(v) where v = +1 means a is closer than b.
    let mut m = vec![vec![None; n]; n];
    for p in rels.pairs() {
        let v = p.r.value();
        m[p.i][p.j] = Some(v);
        m[p.j][p.i] = Some(-v);
    }
    for a in 0..n {
        for b in 0..n {
            let Some(ab) = m[a][b] else { continue };
            if ab < 0 {
                continue;
            }
            for c in 0..n {
                if c == a || c == b {
                    continue;
                }
                let (Some(bc), Some(ac)) = (m[b][c], m[a][c]) else { continue };
                if bc < 0 {
                    continue;
                }
                let strict = ab > 0 || bc > 0;
                if ac < 0 || (strict && ac == 0) {
                    return Err(Inconsistency { a, b, c });
                }
            }
        }
    }
    Ok(())
}

/// Worst-case question count of binary insertion over `n` joints.
pub fn binary_insertion_bound(n: usize) -> usize {
    (2..=n).map(|k| (usize::BITS - (k - 1).leading_zeros()) as usize).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Answers from a known rank per joint (lower = closer).
    fn rank_oracle(rank: &[usize]) -> impl FnMut(usize, usize) -> Result<Answer> + '_ {
        move |i, j| {
            Ok(match rank[i].cmp(&rank[j]) {
                std::cmp::Ordering::Less => Answer::Closer,
                std::cmp::Ordering::Greater => Answer::Farther,
                std::cmp::Ordering::Equal => Answer::Same,
            })
        }
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for k in 0..=p.len() {
                let mut q = p.clone();
                q.insert(k, n - 1);
                out.push(q);
            }
        }
        out
    }

    /// Every assignment of ranks that is a weak ordering (ranks form 0..k).
    fn weak_orderings(n: usize) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        let total = n.pow(n as u32);
        for code in 0..total {
            let mut c = code;
            let rank: Vec<usize> = (0..n)
                .map(|_| {
                    let r = c % n;
                    c /= n;
                    r
                })
                .collect();
            let max = *rank.iter().max().unwrap();
            if (0..=max).all(|r| rank.contains(&r)) {
                out.push(rank);
            }
        }
        out
    }

    fn classes_from_rank(rank: &[usize]) -> Vec<Vec<usize>> {
        let k = rank.iter().max().map_or(0, |m| m + 1);
        (0..k)
            .map(|r| (0..rank.len()).filter(|&j| rank[j] == r).collect())
            .collect()
    }

    #[test]
    fn answer_literals() {
        for a in Answer::ALL {
            assert_eq!(a.as_str().parse::<Answer>().unwrap(), a);
            assert_eq!(serde_json::to_string(&a).unwrap(), format!("\"{a}\""));
        }
        assert!("Closer".parse::<Answer>().is_err());
    }

    #[test]
    fn bound_values() {
        assert_eq!(binary_insertion_bound(1), 0);
        assert_eq!(binary_insertion_bound(2), 1);
        assert_eq!(binary_insertion_bound(3), 3);
        assert_eq!(binary_insertion_bound(14), 41);
    }

    #[test]
    fn two_joints_one_question() {
        let mut s = AnnotationSession::new("x", 2).unwrap();
        assert_eq!(s.next_question(), Some((0, 1)));
        s.submit_answer(Answer::Closer).unwrap();
        assert!(s.is_complete());
        assert_eq!(s.question_count, 1);
        assert_eq!(s.final_ordering().unwrap(), vec![vec![0], vec![1]]);
    }

    #[test]
    fn same_on_two_joints_makes_one_class() {
        let mut s = AnnotationSession::new("x", 2).unwrap();
        s.submit_answer(Answer::Same).unwrap();
        assert!(s.is_complete());
        assert_eq!(s.final_ordering().unwrap(), vec![vec![0, 1]]);
    }

    #[test]
    fn single_joint_is_complete_immediately() {
        let s = AnnotationSession::new("x", 1).unwrap();
        assert!(s.is_complete());
        assert_eq!(s.next_question(), None);
        assert!(AnnotationSession::new("x", 0).is_err());
    }

    #[test]
    fn protocol_and_contract_errors() {
        let mut s = AnnotationSession::new("x", 3).unwrap();
        assert!(matches!(s.final_ordering(), Err(Error::Contract(_))));
        s.drive(rank_oracle(&[0, 1, 2])).unwrap();
        assert!(matches!(s.submit_answer(Answer::Same), Err(Error::Protocol(_))));
        assert!(AnnotationSession::with_order("x", vec![0, 0, 1]).is_err());
        assert!(AnnotationSession::with_order("x", vec![0, 3, 1]).is_err());
    }

    #[test]
    fn three_joints_all_permutations() {
        for p in permutations(3) {
            let mut s = AnnotationSession::new("p", 3).unwrap();
            s.drive(rank_oracle(&p)).unwrap();
            assert!(s.question_count <= 3);
            assert_eq!(s.final_ordering().unwrap(), classes_from_rank(&p), "{p:?}");
        }
    }

    #[test]
    fn all_tied_takes_n_minus_one_questions() {
        for n in 1..=14 {
            let mut s = AnnotationSession::new("t", n).unwrap();
            s.drive(rank_oracle(&vec![0; n])).unwrap();
            assert_eq!(s.question_count, n - 1);
            assert_eq!(s.final_ordering().unwrap(), vec![(0..n).collect::<Vec<_>>()]);
        }
    }

    #[test]
    fn exhaustive_weak_orderings_up_to_five() {
        for n in 1..=5 {
            for rank in weak_orderings(n) {
                for order in permutations(n) {
                    let mut s = AnnotationSession::with_order("w", order.clone()).unwrap();
                    s.drive(rank_oracle(&rank)).unwrap();
                    assert_eq!(s.final_ordering().unwrap(), classes_from_rank(&rank));
                    assert!(s.question_count >= n - 1);
                    assert!(s.question_count <= binary_insertion_bound(n));
                    let rels = s.relations().unwrap();
                    assert_eq!(rels.len(), n * (n - 1) / 2);
                    assert!(check_transitivity(&rels).is_ok());
                }
            }
        }
    }

    #[test]
    fn ambiguous_retries_once_then_soft_ties() {
        // Order 0, 1, 2 with 0 and 1 tied: the class {0, 1} offers a retry.
        let mut s = AnnotationSession::new("a", 3).unwrap();
        s.submit_answer(Answer::Same).unwrap();
        assert_eq!(s.next_question(), Some((0, 2)));
        s.submit_answer(Answer::Ambiguous).unwrap();
        assert_eq!(s.next_question(), Some((1, 2)));
        s.submit_answer(Answer::Ambiguous).unwrap();
        assert!(s.is_complete());
        assert_eq!(s.flagged, vec![2]);
        assert_eq!(s.final_ordering().unwrap(), vec![vec![0, 1, 2]]);
        let rels = s.relations().unwrap();
        assert_eq!(rels.len(), 1);
        assert_eq!(rels.get(0, 1), Some(Relation::Same));
        assert_eq!(s.relations_with(true).unwrap().len(), 3);
    }

    #[test]
    fn retry_answer_resolves_normally() {
        let mut s = AnnotationSession::new("a", 3).unwrap();
        s.submit_answer(Answer::Same).unwrap();
        s.submit_answer(Answer::Ambiguous).unwrap();
        s.submit_answer(Answer::Closer).unwrap();
        assert_eq!(s.final_ordering().unwrap(), vec![vec![0, 1], vec![2]]);
        assert!(s.flagged.is_empty());
        assert_eq!(s.question_count, 3);
        assert_eq!(s.answer_log.len(), 3);
    }

    #[test]
    fn singleton_ambiguous_soft_ties_immediately() {
        let mut s = AnnotationSession::new("a", 2).unwrap();
        s.submit_answer(Answer::Ambiguous).unwrap();
        assert!(s.is_complete());
        assert_eq!(s.relations().unwrap().len(), 0);
    }

    #[test]
    fn replay_reproduces_session() {
        let rank = [3, 0, 2, 2, 1, 0, 4];
        let mut s = AnnotationSession::with_order("r", shuffled_order(7, 9)).unwrap();
        s.drive(rank_oracle(&rank)).unwrap();
        let answers: Vec<Answer> = s.answer_log.iter().map(|l| l.answer).collect();
        let r = AnnotationSession::replay("r", shuffled_order(7, 9), &answers).unwrap();
        assert_eq!(r, s);
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<AnnotationSession>(&json).unwrap(), s);
    }

    #[test]
    fn ordering_to_relations_examples() {
        let r = ordering_to_relations(&[vec![0], vec![1]]).unwrap();
        assert_eq!(r.pairs(), &[OrdinalRelation { i: 0, j: 1, r: Relation::Closer }]);
        let r = ordering_to_relations(&[vec![1], vec![0]]).unwrap();
        assert_eq!(r.get(0, 1), Some(Relation::Farther));
        let r = ordering_to_relations(&[(0..14).collect()]).unwrap();
        assert_eq!(r.len(), 91);
        assert!(r.pairs().iter().all(|p| p.r == Relation::Same));
        assert!(ordering_to_relations(&[vec![0, 1], vec![1]]).is_err());
    }

    #[test]
    fn transitivity_checker_catches_cycles() {
        let rel = |i, j, r| OrdinalRelation { i, j, r };
        let cyc = RelationSet::new(vec![
            rel(0, 1, Relation::Closer),
            rel(1, 2, Relation::Closer),
            rel(0, 2, Relation::Farther),
        ])
        .unwrap();
        assert!(check_transitivity(&cyc).is_err());
        let tie = RelationSet::new(vec![
            rel(0, 1, Relation::Same),
            rel(1, 2, Relation::Closer),
            rel(0, 2, Relation::Same),
        ])
        .unwrap();
        assert!(check_transitivity(&tie).is_err());
        let ok = RelationSet::new(vec![
            rel(0, 1, Relation::Same),
            rel(1, 2, Relation::Closer),
            rel(0, 2, Relation::Closer),
        ])
        .unwrap();
        assert!(check_transitivity(&ok).is_ok());
    }

    proptest! {
        #[test]
        fn random_partitions_are_consistent(rank in proptest::collection::vec(0usize..6, 1..16)) {
            let mut classes: Vec<Vec<usize>> = (0..6)
                .map(|r| (0..rank.len()).filter(|&j| rank[j] == r).collect())
                .collect();
            classes.retain(|c| !c.is_empty());
            let rels = ordering_to_relations(&classes).unwrap();
            prop_assert_eq!(rels.len(), rank.len() * (rank.len() - 1) / 2);
            prop_assert!(check_transitivity(&rels).is_ok());
        }

        #[test]
        fn arbitrary_answers_never_contradict(answers in proptest::collection::vec(0usize..4, 0..60), seed in 0u64..100) {
            let mut s = AnnotationSession::with_order("p", shuffled_order(9, seed)).unwrap();
            for a in answers {
                if s.is_complete() { break; }
                s.submit_answer(Answer::ALL[a]).unwrap();
                prop_assert_eq!(s.question_count, s.answer_log.len());
            }
            let placed: usize = s.classes.iter().map(Vec::len).sum();
            prop_assert!(placed <= 9);
            if s.is_complete() {
                prop_assert!(check_transitivity(&s.relations().unwrap()).is_ok());
                prop_assert!(check_transitivity(&s.relations_with(true).unwrap()).is_ok());
            }
        }
    }
}
