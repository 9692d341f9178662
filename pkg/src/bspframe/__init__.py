"""bspframe: a bulk-synchronous distributed dataframe engine.

Immutable columnar tables, a pluggable collective-communication layer
(in-process threads or TCP full mesh with key-value rendezvous), local
relational kernels, and the distributed operators composed from them,
executed by a gang of persistent stateful workers.
"""

from .comm import Backend, CommTimer, Communicator, ReduceOp, WorldConfig
from .comm import init as comm_init
from .datagen import GenSpec, generate, generate_table
from .dist import dist_groupby, dist_join, dist_map, dist_sort, splitter_select
from .env import ExecEnv
from .errors import EngineError
from .executor import (
    Executor,
    ExecutorConfig,
    execute,
    executor_start,
    executor_stop,
    run,
    start_executable,
    wait,
    worker_main,
)
from .kernels import (
    AggSpec,
    Aggregate,
    JoinType,
    KeySpec,
    add_scalar,
    final_combine,
    hash_keys,
    local_groupby,
    local_hash_join,
    local_sort,
    merge_sorted_runs,
    partial_aggregate,
    range_partition,
    select_splitter_candidates,
)
from .store import store_drop, store_get, store_list, store_put
from .table import (
    Column,
    Domain,
    Schema,
    Table,
    build_table,
    canonicalize,
    concat,
    empty_table,
    select_columns,
    slice_rows,
    table_to_rows,
    tables_equal,
    take,
    validate_table,
)
from .table_comm import (
    PartitionAssignment,
    broadcast_table,
    gather_table,
    repartition_even,
    shuffle_table,
)
from .tableio import (
    deserialize_table,
    read_csv,
    read_table_file,
    serialize_table,
    write_csv,
    write_table_file,
)

__version__ = "0.1.0"
