"""Opcode table shared by the tape and both kernel backends."""

MATMUL = 0
ADD = 1
MUL = 2
SIGMOID = 3
TANH = 4
SOFTMAX_ROWS = 5
CONCAT = 6
SLICE = 7
SUM = 8
SQUARE = 9
RESHAPE = 10

NAMES = {
    MATMUL: "matmul",
    ADD: "add",
    MUL: "mul",
    SIGMOID: "sigmoid",
    TANH: "tanh",
    SOFTMAX_ROWS: "softmax-rowwise",
    CONCAT: "concat",
    SLICE: "slice",
    SUM: "sum",
    SQUARE: "square",
    RESHAPE: "reshape",
}

FROM_NAME = {v: k for k, v in NAMES.items()}
# accepted aliases for the public record() entry point
FROM_NAME["elementwise-mul"] = MUL
FROM_NAME["softmax"] = SOFTMAX_ROWS
