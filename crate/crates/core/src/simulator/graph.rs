use serde::{Deserialize, Serialize};

use crate::domain::DomainSchema;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "vertex", rename_all = "snake_case")]
pub enum Vertex {
    SeekerEntity { entity_type: String, value: String },
    ApiCall { api: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub argument: String,
}

/// Seeker goal: API calls plus the seeker entities and earlier results
/// feeding each of their arguments.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityTransferGraph {
    pub vertices: Vec<Vertex>,
    pub edges: Vec<Edge>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GraphError {
    #[error("edge {0} references a missing vertex")]
    MissingVertex(usize),
    #[error("graph has a cycle")]
    Cycle,
    #[error("unknown api `{0}`")]
    UnknownApi(String),
    #[error("argument `{arg}` of vertex {vertex} has {count} incoming edges")]
    ArgumentCount { vertex: usize, arg: String, count: usize },
    #[error("edge into vertex {vertex} for `{arg}` has an incompatible source")]
    Incompatible { vertex: usize, arg: String },
}

impl EntityTransferGraph {
    pub fn add_vertex(&mut self, v: Vertex) -> usize {
        self.vertices.push(v);
        self.vertices.len() - 1
    }

    /// API vertex indices in insertion (execution) order.
    pub fn api_vertices(&self) -> Vec<usize> {
        (0..self.vertices.len()).filter(|&i| matches!(self.vertices[i], Vertex::ApiCall { .. })).collect()
    }

    pub fn api_sequence(&self) -> Vec<&str> {
        self.vertices
            .iter()
            .filter_map(|v| match v {
                Vertex::ApiCall { api } => Some(api.as_str()),
                _ => None,
            })
            .collect()
    }

    pub fn n_seeker_entities(&self) -> usize {
        self.vertices.iter().filter(|v| matches!(v, Vertex::SeekerEntity { .. })).count()
    }

    /// The vertex feeding `arg` of API vertex `vertex`.
    pub fn source(&self, vertex: usize, arg: &str) -> Option<&Vertex> {
        self.edges.iter().find(|e| e.to == vertex && e.argument == arg).map(|e| &self.vertices[e.from])
    }

    pub fn is_acyclic(&self) -> bool {
        let n = self.vertices.len();
        let mut indegree = vec![0usize; n];
        for e in &self.edges {
            if e.from >= n || e.to >= n {
                return false;
            }
            indegree[e.to] += 1;
        }
        let mut queue: Vec<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
        let mut seen = 0;
        while let Some(v) = queue.pop() {
            seen += 1;
            for e in self.edges.iter().filter(|e| e.from == v) {
                indegree[e.to] -= 1;
                if indegree[e.to] == 0 {
                    queue.push(e.to);
                }
            }
        }
        seen == n
    }

    /// Checks acyclicity, argument completeness and source compatibility.
    pub fn validate(&self, schema: &DomainSchema) -> Result<(), GraphError> {
        for (i, e) in self.edges.iter().enumerate() {
            if e.from >= self.vertices.len() || e.to >= self.vertices.len() {
                return Err(GraphError::MissingVertex(i));
            }
        }
        if !self.is_acyclic() {
            return Err(GraphError::Cycle);
        }
        for (vi, v) in self.vertices.iter().enumerate() {
            let Vertex::ApiCall { api } = v else { continue };
            let spec = schema.api(api).ok_or_else(|| GraphError::UnknownApi(api.clone()))?;
            for arg in &spec.arguments {
                let incoming: Vec<&Edge> = self.edges.iter().filter(|e| e.to == vi && e.argument == arg.name).collect();
                if (arg.required && incoming.len() != 1) || incoming.len() > 1 {
                    return Err(GraphError::ArgumentCount { vertex: vi, arg: arg.name.clone(), count: incoming.len() });
                }
                for e in incoming {
                    let ok = match &self.vertices[e.from] {
                        Vertex::SeekerEntity { entity_type, .. } => entity_type == &arg.arg_type,
                        Vertex::ApiCall { api } => {
                            schema.api(api).and_then(|s| s.produces.as_deref()) == Some(arg.arg_type.as_str())
                        }
                    };
                    if !ok {
                        return Err(GraphError::Incompatible { vertex: vi, arg: arg.name.clone() });
                    }
                }
            }
            for e in self.edges.iter().filter(|e| e.to == vi) {
                if !spec.arguments.iter().any(|a| a.name == e.argument) {
                    return Err(GraphError::Incompatible { vertex: vi, arg: e.argument.clone() });
                }
            }
        }
        for e in &self.edges {
            if matches!(self.vertices[e.to], Vertex::SeekerEntity { .. }) {
                return Err(GraphError::Incompatible { vertex: e.to, arg: e.argument.clone() });
            }
        }
        Ok(())
    }
}
