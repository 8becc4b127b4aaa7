"""Split a labelled collection across clients without skewing the classes.

Each class is shuffled and dealt round-robin, so every client ends up with
(almost) the same number of positives and negatives.
"""

from fedgate.federated import stratified_partition

ids = [f"clip{i:02d}" for i in range(23)]
labels = [1 if i % 3 == 0 else 0 for i in range(23)]
print(f"{sum(labels)} positive and {len(labels) - sum(labels)} negative clips over 4 clients")
for shard in stratified_partition(ids, labels, 4, seed=7):
    print(f"  {shard.client_id}: {len(shard):2d} clips, {shard.n_pos} pos / {shard.n_neg} neg")

again = stratified_partition(ids, labels, 4, seed=7)
other = stratified_partition(ids, labels, 4, seed=8)
print("same seed, same split:", again == stratified_partition(ids, labels, 4, seed=7))
print("new seed, new split:", [s.sample_ids for s in again] != [s.sample_ids for s in other])
