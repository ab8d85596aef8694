//! Library of named cells written in the DSL.

use super::{parse, Architecture, DslError};

/// Names accepted by [`builtin`].
pub const BUILTIN_NAMES: [&str; 5] = ["tanh_rnn", "gru", "lstm", "mgu", "bc3"];

pub const TANH_RNN: &str = "Tanh(Add(MM(x_t),MM(h_tm1)))";

/// GRU exactly as published, typeset sources and trailing comma included.
pub const GRU_LISTING: &str = r"
Gate3(
    Tanh(
        Add(
            MM($x_t$),
            Mult(
                MM($h_{t-1}$),
                Sigmoid(
                    Add( MM($h_{t-1}$), MM($x_t$) )
                )
            )
        )
    ),
    $h_{t-1}$,
    Sigmoid(
        Add( MM($h_{t-1}$), MM($x_t$) ),
    )
)";

/// BC3 as published, with the `c_t` tap marked inline on the `Tanh` that
/// wraps the first `Gate3`.
pub const BC3_LISTING: &str = r"
Gate3(
    @ct(Tanh(
        Gate3(
            MM($x_t$),
            Mult(
                MM(
                    Mult(MM($c_{t-1}$),MM($x_t$))
                ),
                MM($x_t$)
            ),
            Sigmoid(
                Add( MM($x_t$), MM($h_{t-1}$) )
            )
        )
    )),
    $h_{t-1}$,
    Sigmoid(
        Add( MM($x_t$), MM($h_{t-1}$) )
    )
)";

/// h = o * tanh(c), c = f * c_tm1 + i * g, tap on the `Add` producing c.
pub const LSTM: &str = "Mult(\
    Sigmoid(Add(MM(x_t),MM(h_tm1))),\
    Tanh(@ct(Add(\
        Mult(Sigmoid(Add(MM(x_t),MM(h_tm1))),c_tm1),\
        Mult(Sigmoid(Add(MM(x_t),MM(h_tm1))),Tanh(Add(MM(x_t),MM(h_tm1))))\
    ))))";

/// Minimal gated unit. The forget gate appears twice with independent
/// weights; tying them recovers the usual single-gate formulation.
pub const MGU: &str = "Gate3(\
    Tanh(Add(MM(x_t),MM(Mult(Sigmoid(Add(MM(x_t),MM(h_tm1))),h_tm1)))),\
    h_tm1,\
    Sigmoid(Add(MM(x_t),MM(h_tm1))))";

pub fn builtin(name: &str) -> Result<Architecture, DslError> {
    let text = match name {
        "tanh_rnn" => TANH_RNN,
        "gru" => GRU_LISTING,
        "lstm" => LSTM,
        "mgu" => MGU,
        "bc3" => BC3_LISTING,
        _ => return Err(DslError::UnknownCell(name.to_string())),
    };
    parse(text)
}
