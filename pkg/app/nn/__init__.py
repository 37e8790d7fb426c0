from app.nn.attention import (
    AttentionParams,
    HeadOutputs,
    aggregate_linear,
    attention_weights,
    concat_heads,
    multi_head_attention,
    project_heads,
    scaled_dot_attention,
)
from app.nn.encoder import EncoderModel, aggregation_parameter_delta
from app.nn.routing import (
    CapsuleParams,
    RoutingState,
    aggregate_routing,
    build_input_capsules,
    compute_votes,
    em_e_step,
    em_m_step,
    em_routing,
    output_capsule,
    simple_routing,
    squash,
)
