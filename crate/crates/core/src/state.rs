//! The state space of partially specified binary vectors.
//!
//! A state is a length-`D` vector over `{0, 1, void}`. Forward actions paint a
//! void entry with a bit, backward actions erase a set entry. The induced DAG
//! is the `D`-th Cartesian power of the three-state chain `void -> {0, 1}`:
//! every complete trajectory from the all-void state to a fully painted vector
//! has exactly `D` forward actions.

use std::fmt;

/// One entry of a state vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Cell {
    Zero,
    One,
    Void,
}

impl Cell {
    /// Network input encoding: 0.0 / 1.0 for bits, -1.0 for void.
    pub fn encode(self) -> f64 {
        match self {
            Cell::Zero => 0.0,
            Cell::One => 1.0,
            Cell::Void => -1.0,
        }
    }

    pub fn is_void(self) -> bool {
        matches!(self, Cell::Void)
    }

    pub fn from_bit(bit: bool) -> Self {
        if bit {
            Cell::One
        } else {
            Cell::Zero
        }
    }

    /// The bit stored in this cell, if any.
    pub fn bit(self) -> Option<bool> {
        match self {
            Cell::Zero => Some(false),
            Cell::One => Some(true),
            Cell::Void => None,
        }
    }
}

/// An edge of the state DAG.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Action {
    /// Paint a void position with a bit value.
    Forward { position: usize, value: bool },
    /// Erase a set position back to void.
    Backward { position: usize },
}

impl Action {
    /// Flat index of a forward action into a `2D` logit vector.
    pub fn forward_index(position: usize, value: bool) -> usize {
        2 * position + value as usize
    }

    /// Inverse of [`Action::forward_index`].
    pub fn forward_from_index(index: usize) -> Action {
        Action::Forward {
            position: index / 2,
            value: index % 2 == 1,
        }
    }
}

/// Errors from applying actions to states.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StateError {
    /// Forward action at a position that is already set.
    PositionNotVoid { position: usize },
    /// Backward action at a position that holds no bit.
    PositionVoid { position: usize },
    /// Action position outside `[0, D)`.
    PositionOutOfRange { position: usize, dim: usize },
}

impl fmt::Display for StateError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StateError::PositionNotVoid { position } => {
                write!(f, "invalid action: position {position} is already set")
            }
            StateError::PositionVoid { position } => {
                write!(f, "invalid action: position {position} holds no bit")
            }
            StateError::PositionOutOfRange { position, dim } => {
                write!(f, "action position {position} out of range for D={dim}")
            }
        }
    }
}

impl std::error::Error for StateError {}

/// A partially specified binary vector; immutable value type.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct State {
    cells: Vec<Cell>,
}

impl State {
    /// The all-void initial state of dimension `d`.
    pub fn initial(d: usize) -> Self {
        State {
            cells: vec![Cell::Void; d],
        }
    }

    /// A terminal state from a bit vector.
    pub fn from_bits(bits: &[bool]) -> Self {
        State {
            cells: bits.iter().map(|&b| Cell::from_bit(b)).collect(),
        }
    }

    pub fn from_cells(cells: Vec<Cell>) -> Self {
        State { cells }
    }

    pub fn dim(&self) -> usize {
        self.cells.len()
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn cell(&self, position: usize) -> Cell {
        self.cells[position]
    }

    /// Number of non-void entries.
    pub fn num_set(&self) -> usize {
        self.cells.iter().filter(|c| !c.is_void()).count()
    }

    pub fn is_terminal(&self) -> bool {
        self.cells.iter().all(|c| !c.is_void())
    }

    pub fn is_initial(&self) -> bool {
        self.cells.iter().all(|c| c.is_void())
    }

    /// Real-vector encoding for network input: 0.0 / 1.0 / -1.0 for void.
    pub fn encode(&self) -> Vec<f64> {
        self.cells.iter().map(|c| c.encode()).collect()
    }

    /// Write the encoding into a pre-allocated slice of length `D`.
    pub fn encode_into(&self, out: &mut [f64]) {
        for (o, c) in out.iter_mut().zip(&self.cells) {
            *o = c.encode();
        }
    }

    /// Bits of a terminal state. Panics if any entry is void.
    pub fn to_bits(&self) -> Vec<bool> {
        self.cells
            .iter()
            .map(|c| c.bit().expect("state is not terminal"))
            .collect()
    }

    /// Terminal states with D <= 64 packed as an integer, bit `i` = position `i`.
    pub fn terminal_index(&self) -> u64 {
        assert!(self.dim() <= 64, "terminal_index requires D <= 64");
        let mut ix = 0u64;
        for (i, c) in self.cells.iter().enumerate() {
            if c.bit().expect("state is not terminal") {
                ix |= 1 << i;
            }
        }
        ix
    }

    /// Inverse of [`State::terminal_index`].
    pub fn from_terminal_index(ix: u64, d: usize) -> Self {
        let bits: Vec<bool> = (0..d).map(|i| ix >> i & 1 == 1).collect();
        State::from_bits(&bits)
    }

    fn check_position(&self, position: usize) -> Result<(), StateError> {
        if position >= self.dim() {
            Err(StateError::PositionOutOfRange {
                position,
                dim: self.dim(),
            })
        } else {
            Ok(())
        }
    }

    /// Paint `position` with `value`; the position must be void.
    pub fn apply_forward(&self, position: usize, value: bool) -> Result<State, StateError> {
        self.check_position(position)?;
        if !self.cells[position].is_void() {
            return Err(StateError::PositionNotVoid { position });
        }
        let mut cells = self.cells.clone();
        cells[position] = Cell::from_bit(value);
        Ok(State { cells })
    }

    /// Erase `position` back to void; the position must hold a bit.
    pub fn apply_backward(&self, position: usize) -> Result<State, StateError> {
        self.check_position(position)?;
        if self.cells[position].is_void() {
            return Err(StateError::PositionVoid { position });
        }
        let mut cells = self.cells.clone();
        cells[position] = Cell::Void;
        Ok(State { cells })
    }

    /// Apply any action, dispatching on its variant.
    pub fn apply(&self, action: Action) -> Result<State, StateError> {
        match action {
            Action::Forward { position, value } => self.apply_forward(position, value),
            Action::Backward { position } => self.apply_backward(position),
        }
    }

    /// Validity masks over the flat action layouts: forward mask of length
    /// `2D` (index `2*position + bit`), backward mask of length `D`.
    pub fn action_masks(&self) -> (Vec<bool>, Vec<bool>) {
        let d = self.dim();
        let mut forward = vec![false; 2 * d];
        let mut backward = vec![false; d];
        for (i, c) in self.cells.iter().enumerate() {
            if c.is_void() {
                forward[2 * i] = true;
                forward[2 * i + 1] = true;
            } else {
                backward[i] = true;
            }
        }
        (forward, backward)
    }

    /// Positions currently holding a bit.
    pub fn set_positions(&self) -> Vec<usize> {
        self.cells
            .iter()
            .enumerate()
            .filter_map(|(i, c)| (!c.is_void()).then_some(i))
            .collect()
    }

    /// Positions currently void.
    pub fn void_positions(&self) -> Vec<usize> {
        self.cells
            .iter()
            .enumerate()
            .filter_map(|(i, c)| c.is_void().then_some(i))
            .collect()
    }
}

impl fmt::Display for State {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.cells {
            let ch = match c {
                Cell::Zero => '0',
                Cell::One => '1',
                Cell::Void => '.',
            };
            write!(f, "{ch}")?;
        }
        Ok(())
    }
}

impl fmt::Debug for State {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "State({self})")
    }
}

/// Direction in which a trajectory's actions were sampled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    SampledForward,
    SampledBackward,
}

/// A forward-oriented action sequence through the DAG with cached states and
/// log-probabilities of its edges under the policy that sampled it.
#[derive(Clone, Debug)]
pub struct Trajectory {
    /// Earliest state; the all-void state for complete trajectories.
    pub start: State,
    /// Forward actions in paint order.
    pub actions: Vec<(usize, bool)>,
    /// Cached states, `states[0] == start`, length `actions.len() + 1`.
    pub states: Vec<State>,
    /// Sum of `log P_F` over the trajectory's edges.
    pub log_pf: f64,
    /// Sum of `log P_B` over the trajectory's edges.
    pub log_pb: f64,
    pub direction: Direction,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Latest (deepest) state.
    pub fn last(&self) -> &State {
        self.states.last().expect("trajectory has at least one state")
    }

    /// A complete trajectory runs from the initial state to a terminal one.
    pub fn is_complete(&self) -> bool {
        self.start.is_initial() && self.len() == self.start.dim()
    }

    /// Rebuild the cached states from `start` and `actions`.
    pub fn from_actions(
        start: State,
        actions: Vec<(usize, bool)>,
        direction: Direction,
    ) -> Result<Trajectory, StateError> {
        let mut states = Vec::with_capacity(actions.len() + 1);
        states.push(start.clone());
        for &(pos, val) in &actions {
            let next = states.last().unwrap().apply_forward(pos, val)?;
            states.push(next);
        }
        Ok(Trajectory {
            start,
            actions,
            states,
            log_pf: 0.0,
            log_pb: 0.0,
            direction,
        })
    }
}
