//! Skeletal topology: named joints, a parent link per joint, and a root.
//!
//! The root is encoded self-referentially (`parents[root] == root`). Every
//! other joint owns exactly one bone, the segment from its parent to itself,
//! so bones are indexed by their child joint.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const TOY8_JSON: &str = include_str!("../topologies/toy8.json");
const UPPER50_JSON: &str = include_str!("../topologies/upper50.json");

/// On-disk topology layout. Key names are fixed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopologyFile {
    pub joints: Vec<String>,
    pub parents: Vec<usize>,
    pub root: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkeletonTopology {
    id: String,
    joint_names: Vec<String>,
    parents: Vec<usize>,
    root: usize,
    /// Joints ordered so every parent precedes its children.
    order: Vec<usize>,
}

impl SkeletonTopology {
    /// Validates the tree invariants and builds the topology.
    pub fn new(
        id: impl Into<String>,
        joint_names: Vec<String>,
        parents: Vec<usize>,
        root: usize,
    ) -> Result<Self> {
        let j = joint_names.len();
        if j == 0 {
            return Err(Error::Topology("no joints".into()));
        }
        if parents.len() != j {
            return Err(Error::Topology(format!(
                "{} joints but {} parent entries",
                j,
                parents.len()
            )));
        }
        if root >= j {
            return Err(Error::Topology(format!(
                "root index {root} out of range (J={j})"
            )));
        }
        if let Some(i) = parents.iter().position(|&p| p >= j) {
            return Err(Error::Topology(format!(
                "parent index {} out of range at joint {i} (J={j})",
                parents[i]
            )));
        }
        for start in 0..j {
            let mut cur = start;
            let mut steps = 0;
            while parents[cur] != cur {
                cur = parents[cur];
                steps += 1;
                if steps > j {
                    return Err(Error::Topology(format!("cycle detected at joint {start}")));
                }
            }
        }
        let roots: Vec<usize> = (0..j).filter(|&i| parents[i] == i).collect();
        match roots.as_slice() {
            [] => {
                return Err(Error::Topology(
                    "zero roots: no joint is its own parent".into(),
                ))
            }
            [r] if *r != root => {
                return Err(Error::Topology(format!(
                    "joint {r} is self-parented but root is {root}"
                )))
            }
            [_] => {}
            many => {
                return Err(Error::Topology(format!(
                    "multiple roots at joints {many:?}"
                )))
            }
        }
        let mut children = vec![Vec::new(); j];
        for (c, &p) in parents.iter().enumerate() {
            if c != root {
                children[p].push(c);
            }
        }
        let mut order = Vec::with_capacity(j);
        let mut queue = std::collections::VecDeque::from([root]);
        while let Some(n) = queue.pop_front() {
            order.push(n);
            queue.extend(children[n].iter().copied());
        }

        Ok(Self {
            id: id.into(),
            joint_names,
            parents,
            root,
            order,
        })
    }

    pub fn from_file_struct(id: impl Into<String>, file: TopologyFile) -> Result<Self> {
        Self::new(id, file.joints, file.parents, file.root)
    }

    pub fn from_json_str(id: impl Into<String>, text: &str) -> Result<Self> {
        let file: TopologyFile =
            serde_json::from_str(text).map_err(|e| Error::Parse(format!("topology: {e}")))?;
        Self::from_file_struct(id, file)
    }

    /// Built-in presets: `toy8` and `upper50`.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy8" => Self::from_json_str("toy8", TOY8_JSON),
            "upper50" => Self::from_json_str("upper50", UPPER50_JSON),
            other => Err(Error::InvalidArgument(format!(
                "unknown topology preset \"{other}\""
            ))),
        }
    }

    pub fn toy8() -> Self {
        Self::preset("toy8").expect("toy8 preset is valid")
    }

    pub fn upper50() -> Self {
        Self::preset("upper50").expect("upper50 preset is valid")
    }

    /// Resolves a preset name or, failing that, a path to a topology file.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        match name_or_path {
            "toy8" | "upper50" => Self::preset(name_or_path),
            path => load_topology(path),
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn joint_names(&self) -> &[String] {
        &self.joint_names
    }

    pub fn parents(&self) -> &[usize] {
        &self.parents
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn num_joints(&self) -> usize {
        self.joint_names.len()
    }

    pub fn num_bones(&self) -> usize {
        self.num_joints() - 1
    }

    /// Breadth-first joint order starting at the root.
    pub fn topological_order(&self) -> &[usize] {
        &self.order
    }

    pub fn to_file_struct(&self) -> TopologyFile {
        TopologyFile {
            joints: self.joint_names.clone(),
            parents: self.parents.clone(),
            root: self.root,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_file_struct()).expect("topology serializes")
    }
}

/// Reads a topology JSON file. The topology id is the file stem.
pub fn load_topology(path: impl AsRef<Path>) -> Result<SkeletonTopology> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    SkeletonTopology::from_json_str(id, &text)
}

/// `(parent, child)` for every bone, ordered by child index.
pub fn bone_endpoints(topology: &SkeletonTopology) -> Vec<(usize, usize)> {
    topology
        .parents
        .iter()
        .enumerate()
        .filter(|&(c, _)| c != topology.root)
        .map(|(c, &p)| (p, c))
        .collect()
}

/// Joint coordinates for one frame, one `[x, y, z]` row per joint.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose3D {
    pub coords: Vec<[f64; 3]>,
}

impl Pose3D {
    pub fn new(coords: Vec<[f64; 3]>) -> Self {
        Self { coords }
    }

    pub fn zeros(num_joints: usize) -> Self {
        Self {
            coords: vec![[0.0; 3]; num_joints],
        }
    }

    pub fn num_joints(&self) -> usize {
        self.coords.len()
    }

    pub fn is_finite(&self) -> bool {
        self.coords.iter().flatten().all(|v| v.is_finite())
    }

    pub fn check(&self, topology: &SkeletonTopology) -> Result<()> {
        if self.num_joints() != topology.num_joints() {
            return Err(Error::Shape(format!(
                "pose has {} joints, topology {} has {}",
                self.num_joints(),
                topology.id(),
                topology.num_joints()
            )));
        }
        if !self.is_finite() {
            return Err(Error::InvalidArgument(
                "pose contains non-finite values".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("j{i}")).collect()
    }

    #[test]
    fn minimal_chain() {
        let t = SkeletonTopology::from_json_str(
            "chain",
            r#"{"joints":["neck","shoulder","elbow"],"parents":[0,0,1],"root":0}"#,
        )
        .unwrap();
        assert_eq!(t.num_bones(), 2);
        assert_eq!(bone_endpoints(&t), vec![(0, 1), (1, 2)]);
    }

    #[test]
    fn two_cycle_is_rejected() {
        let err = SkeletonTopology::new("c", names(2), vec![1, 0], 0).unwrap_err();
        assert!(
            err.to_string().contains("cycle detected at joint 0"),
            "{err}"
        );

        let err = SkeletonTopology::new("c", names(4), vec![0, 2, 1, 0], 0).unwrap_err();
        assert!(
            err.to_string().contains("cycle detected at joint 1"),
            "{err}"
        );
    }

    #[test]
    fn root_errors() {
        let err = SkeletonTopology::new("m", names(3), vec![0, 1, 0], 0).unwrap_err();
        assert!(err.to_string().contains("multiple roots"), "{err}");
        let err = SkeletonTopology::new("m", names(2), vec![0, 5], 0).unwrap_err();
        assert!(err.to_string().contains("at joint 1"), "{err}");
        let err = SkeletonTopology::new("m", names(2), vec![0, 0], 1).unwrap_err();
        assert!(err.to_string().contains("root is 1"), "{err}");
    }

    #[test]
    fn single_joint_and_star() {
        let single = SkeletonTopology::new("one", names(1), vec![0], 0).unwrap();
        assert!(bone_endpoints(&single).is_empty());
        let star = SkeletonTopology::new("star", names(4), vec![0, 0, 0, 0], 0).unwrap();
        assert_eq!(bone_endpoints(&star), vec![(0, 1), (0, 2), (0, 3)]);
    }

    #[test]
    fn presets_are_valid() {
        let toy = SkeletonTopology::toy8();
        assert_eq!(toy.num_joints(), 8);
        assert_eq!(bone_endpoints(&toy).len(), 7);
        let upper = SkeletonTopology::upper50();
        assert_eq!(upper.num_joints(), 50);
        assert_eq!(bone_endpoints(&upper).len(), 49);
        assert_eq!(upper.joint_names()[upper.root()], "neck");
    }

    #[test]
    fn order_puts_parents_first() {
        let t = SkeletonTopology::new("rev", names(4), vec![3, 0, 1, 3], 3).unwrap();
        let pos: Vec<usize> = (0..4)
            .map(|j| t.topological_order().iter().position(|&o| o == j).unwrap())
            .collect();
        for (c, &p) in t.parents().iter().enumerate() {
            if c != t.root() {
                assert!(pos[p] < pos[c]);
            }
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("upper50.json");
        let t = SkeletonTopology::upper50();
        std::fs::write(&path, t.to_json()).unwrap();
        assert_eq!(load_topology(&path).unwrap(), t);
    }
}
