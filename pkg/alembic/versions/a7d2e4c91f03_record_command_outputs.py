"""Record command outputs alongside seed runs

Revision ID: a7d2e4c91f03
Revises: 3b1f6c2a9d40
Create Date: 2026-10-18 15:40:07.218904

"""
from typing import Sequence, Union

from alembic import op
import sqlalchemy as sa


# revision identifiers, used by Alembic.
revision: str = 'a7d2e4c91f03'
down_revision: Union[str, Sequence[str], None] = '3b1f6c2a9d40'
branch_labels: Union[str, Sequence[str], None] = None
depends_on: Union[str, Sequence[str], None] = None


def upgrade() -> None:
    """Upgrade schema."""
    with op.batch_alter_table('runs', schema=None) as batch_op:
        batch_op.add_column(sa.Column('kind', sa.String(), nullable=False, server_default='seed'))
        batch_op.alter_column('seed', existing_type=sa.Integer(), nullable=True)


def downgrade() -> None:
    """Downgrade schema."""
    op.execute("DELETE FROM artifacts WHERE run_id IN (SELECT id FROM runs WHERE kind != 'seed')")
    op.execute("DELETE FROM runs WHERE kind != 'seed'")
    with op.batch_alter_table('runs', schema=None) as batch_op:
        batch_op.alter_column('seed', existing_type=sa.Integer(), nullable=False)
        batch_op.drop_column('kind')
