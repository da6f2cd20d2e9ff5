"""Compare cascade behaviour on a chain and on a two-node cycle as max_rounds grows."""

import argparse

from smartstore.integrity import cascade_revalidate
from smartstore.schema import SUPER_USER, TEXT, EntitySchema, RefTo, SchemaRegistry
from smartstore.store import MemoryStore
from smartstore.transaction import with_role_do_transaction


def node_store(edges):
    registry = SchemaRegistry()
    registry.register(EntitySchema("Node", {"label": TEXT, "next": RefTo("Node")}))
    store = MemoryStore(registry=registry)

    def build(tx):
        handles = {n: tx.create_entity("Node", n) for n in sorted(set(edges) | set(edges.values()))}
        for src, dst in edges.items():
            handles[src]["next"] = handles[dst]
        tx.commit()

    with_role_do_transaction(store, SUPER_USER, build).raise_for_status()

    def touch(tx):
        tx.read_entity("a")["label"] = "changed"
        tx.commit()

    with_role_do_transaction(store, SUPER_USER, touch).raise_for_status()
    return store


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--max-rounds", type=int, nargs="+", default=[1, 2, 3, 5, 8])
    args = parser.parse_args()
    shapes = {"chain c->b->a": {"c": "b", "b": "a"}, "cycle a<->b": {"a": "b", "b": "a"}}
    print("shape           rounds  used  writes  repaired  unresolved")
    for label, edges in shapes.items():
        for rounds in args.max_rounds:
            store = node_store(edges)
            out = cascade_revalidate(store, SUPER_USER, ["a"], max_rounds=rounds)
            print(
                f"{label:<15} {rounds:<7} {out.rounds_used:<5} {len(out.written):<7} "
                f"{','.join(sorted(map(str, out.repaired))) or '-':<9} "
                f"{','.join(sorted(map(str, out.unresolved))) or '-'}"
            )


if __name__ == "__main__":
    main()
